import importlib.util
import logging
from pathlib import Path
from typing import Any, ClassVar

from acmesh_architect.core.errors import ErrorCode, ModelError
from acmesh_architect.model.potentials import SitePotential


class PluginManager:
    """Discovers site potential plugins and builds potentials by kind."""

    _plugins: ClassVar[dict[str, Any]] = {}

    @classmethod
    def load_plugins(cls, plugin_dir: str | None = None) -> None:
        """Looks for acm_potential_*.py files next to this module and in ``plugin_dir``."""
        search_dirs = [Path(__file__).parent]
        if plugin_dir:
            search_dirs.append(Path(plugin_dir))

        for d in search_dirs:
            if not d.exists() or not d.is_dir():
                continue
            for plugin_file in sorted(d.glob("acm_potential_*.py")):
                plugin_name = plugin_file.stem
                if plugin_name in cls._plugins:
                    continue

                try:
                    spec = importlib.util.spec_from_file_location(plugin_name, plugin_file)
                    if spec and spec.loader:
                        module = importlib.util.module_from_spec(spec)
                        spec.loader.exec_module(module)
                        if not hasattr(module, "POTENTIAL_KIND") or not hasattr(module, "build"):
                            logging.warning(f"⚠️ {plugin_file.name} lacks POTENTIAL_KIND or build(); skipped")
                            continue
                        cls._plugins[plugin_name] = module
                        logging.debug(f"Loaded potential plugin: {plugin_name} ({module.POTENTIAL_KIND})")
                except Exception as e:
                    logging.error(f"❌ Failed to load plugin {plugin_file.name}: {e}")

    @classmethod
    def kinds(cls) -> dict[str, Any]:
        cls.load_plugins()
        return {str(module.POTENTIAL_KIND): module for module in cls._plugins.values()}

    @classmethod
    def display_loaded_plugins(cls) -> list[str]:
        info = []
        for kind, module in sorted(cls.kinds().items()):
            desc = getattr(module, "PLUGIN_DESCRIPTION", "No description provided.")
            info.append(f"  * {kind}: {desc}")
        return info

    @classmethod
    def build_potential(cls, kind: str, params: dict[str, Any] | None = None) -> SitePotential:
        """Instantiates the potential registered under ``kind``."""
        available = cls.kinds()
        if kind not in available:
            raise ModelError(
                ErrorCode.BAD_PRECONDITION,
                f"unknown potential kind '{kind}'",
                {"available": sorted(available)},
            )
        try:
            return available[kind].build(dict(params or {}))
        except TypeError as e:
            raise ModelError(ErrorCode.BAD_PRECONDITION, f"bad parameters for {kind}: {e}") from e

    @classmethod
    def reset(cls) -> None:
        cls._plugins.clear()
