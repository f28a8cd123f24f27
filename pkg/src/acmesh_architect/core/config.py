"""
Declarative run configuration: dataclasses mirrored one-to-one by a YAML
file, with ``section.key=value`` overrides from the command line.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import yaml

from acmesh_architect.core.errors import DriverError, ErrorCode
from acmesh_architect.resources.constants import (
    BOUNDARY_SPACING_CELLS,
    CU_LATTICE_CONSTANT,
    G_TOL,
    GRADING,
    LBFGS_MEMORY,
    MAX_ITER,
    MAX_LAYERS,
    NODE_BUDGET,
    Q_MIN,
    REFERENCE_MAX_ATOMS,
    RMAX_MULTIPLIER,
    SMOOTH_BAND_HOPS,
    SMOOTH_ROUNDS,
    SWAP_FACTOR,
    SWAP_MAX_SWEEPS,
    TAU1,
    TAU2,
)


@dataclass
class LatticeConfig:
    structure: str = "FCC"
    a: float = CU_LATTICE_CONSTANT
    r_cut_cells: float = 1.5
    voids: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class PotentialConfig:
    kind: str = "MORSE_PAIR"
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class DomainConfig:
    """Domain geometry in units of the lattice constant."""

    shape: str = "box"
    center: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    extent_cells: list[float] = field(default_factory=lambda: [8.0, 8.0, 8.0])
    boundary_spacing_cells: float = BOUNDARY_SPACING_CELLS
    grading: float = GRADING


@dataclass
class CouplingConfig:
    """Initial atomistic core radius and blend width, in units of the lattice constant."""

    r_atom_cells: float = 2.5
    l_blend_cells: float = 1.0


@dataclass
class MeshConfig:
    c_r: float = RMAX_MULTIPLIER
    q_min: float = Q_MIN
    node_budget: int = NODE_BUDGET
    swap_factor: float = SWAP_FACTOR
    swap_max_sweeps: int = SWAP_MAX_SWEEPS
    smooth_rounds: int = SMOOTH_ROUNDS
    smooth_band_hops: int = SMOOTH_BAND_HOPS


@dataclass
class AdaptConfig:
    tau1: float = TAU1
    tau2: float = TAU2
    max_layers: int = MAX_LAYERS
    max_steps: int = 4
    dof_budget: int = 3 * NODE_BUDGET
    layer_spacing: float | None = None
    g_tol: float = G_TOL
    max_iter: int = MAX_ITER
    lbfgs_memory: int = LBFGS_MEMORY


@dataclass
class RunConfig:
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    domain: DomainConfig = field(default_factory=DomainConfig)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    seed: int = 0
    output_dir: str = "acmesh_out"
    reference_max_atoms: int = REFERENCE_MAX_ATOMS
    name: str = "custom"

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


SECTIONS: dict[str, type] = {
    "lattice": LatticeConfig,
    "potential": PotentialConfig,
    "domain": DomainConfig,
    "coupling": CouplingConfig,
    "mesh": MeshConfig,
    "adapt": AdaptConfig,
}


def _build_section(name: str, cls: type, data: Any) -> Any:
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise DriverError(ErrorCode.CONFIG_ERROR, f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise DriverError(ErrorCode.CONFIG_ERROR, f"unknown keys in '{name}': {unknown}", {"allowed": sorted(known)})
    return cls(**data)


def config_from_dict(data: dict[str, Any] | None) -> RunConfig:
    """Builds and validates a RunConfig; unknown keys are errors."""
    data = dict(data or {})
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise DriverError(ErrorCode.CONFIG_ERROR, f"unknown top-level keys: {unknown}", {"allowed": sorted(top)})
    sections = {name: _build_section(name, cls, data.pop(name, None)) for name, cls in SECTIONS.items()}
    try:
        cfg = RunConfig(**sections, **data)
    except TypeError as e:
        raise DriverError(ErrorCode.CONFIG_ERROR, str(e)) from e
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    problems = []
    if not 0 < cfg.adapt.tau1 < 1:
        problems.append(f"adapt.tau1 must lie in (0, 1), got {cfg.adapt.tau1}")
    if not 0 < cfg.adapt.tau2 < 1:
        problems.append(f"adapt.tau2 must lie in (0, 1), got {cfg.adapt.tau2}")
    if cfg.adapt.max_layers < 1:
        problems.append(f"adapt.max_layers must be >= 1, got {cfg.adapt.max_layers}")
    if cfg.adapt.max_steps < 0:
        problems.append(f"adapt.max_steps must be >= 0, got {cfg.adapt.max_steps}")
    if cfg.lattice.structure.upper() not in ("FCC", "BCC"):
        problems.append(f"lattice.structure must be FCC or BCC, got {cfg.lattice.structure}")
    if cfg.coupling.l_blend_cells <= 0 or cfg.coupling.r_atom_cells < 0:
        problems.append("coupling radii must satisfy r_atom_cells >= 0 and l_blend_cells > 0")
    for k, void in enumerate(cfg.lattice.voids):
        if set(void) != {"center", "radius_cells"}:
            problems.append(f"lattice.voids[{k}] needs exactly 'center' (cells) and 'radius_cells'")
    if problems:
        raise DriverError(ErrorCode.CONFIG_ERROR, "; ".join(problems), {"problems": problems})


def read_config_data(path: str) -> dict[str, Any]:
    """Raw mapping of a YAML config file, before defaults are applied."""
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise DriverError(ErrorCode.CONFIG_ERROR, f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise DriverError(ErrorCode.CONFIG_ERROR, f"malformed YAML in {path}: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise DriverError(ErrorCode.CONFIG_ERROR, f"{path} must hold a mapping at the top level")
    return data or {}


def load_config(path: str) -> RunConfig:
    return config_from_dict(read_config_data(path))


def merge_config_data(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    """Section-wise merge: keys of ``update`` win, sections are merged one level deep."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(value)
        else:
            out[key] = value
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.as_dict(), sort_keys=False)


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Applies ``section.key=value`` overrides; values are parsed as YAML scalars/lists."""
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for item in overrides:
        if "=" not in item:
            raise DriverError(ErrorCode.CONFIG_ERROR, f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise DriverError(ErrorCode.CONFIG_ERROR, f"cannot parse value of '{key}': {e}") from e
        parts = key.strip().split(".")
        if len(parts) == 1:
            data[parts[0]] = value
        elif len(parts) == 2:
            section = data.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise DriverError(ErrorCode.CONFIG_ERROR, f"'{parts[0]}' is not a section")
            section[parts[1]] = value
        else:
            raise DriverError(ErrorCode.CONFIG_ERROR, f"override key '{key}' is nested too deeply")
        logging.debug(f"config override {key} = {value!r}")
    return data
