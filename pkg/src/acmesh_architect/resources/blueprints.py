import json
from pathlib import Path
from typing import Any

BLUEPRINT_BASE = Path(__file__).parent / "blueprints"


class LazyBlueprintDict(dict):
    """Lazily loads the built-in experiment blueprints (one JSON file each)."""

    def __init__(self, base: Path = BLUEPRINT_BASE) -> None:
        self.base = base
        self._data: dict | None = None

    def _load(self) -> dict:
        if self._data is None:
            self._data = {}
            if self.base.exists():
                for item in sorted(self.base.glob("*.json")):
                    self._data[item.stem] = json.loads(item.read_text(encoding="utf-8"))
        return self._data

    def __getitem__(self, key: str) -> Any:
        return self._load()[key]

    def get(self, key: str, default: Any | None = None) -> Any:
        return self._load().get(key, default)

    def items(self) -> Any:
        return self._load().items()

    def keys(self) -> Any:
        return self._load().keys()

    def values(self) -> Any:
        return self._load().values()

    def __iter__(self) -> Any:
        return iter(self._load())

    def __len__(self) -> int:
        return len(self._load())

    def __contains__(self, key: object) -> bool:
        return key in self._load()


BLUEPRINTS = LazyBlueprintDict()


def blueprint_config(name: str) -> dict[str, Any]:
    """The config mapping of a built-in blueprint (a deep copy)."""
    return json.loads(json.dumps(BLUEPRINTS[name]["config"]))
