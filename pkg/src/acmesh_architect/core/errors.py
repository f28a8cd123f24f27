"""
Typed failures raised by the mesh kernel, the model and the driver.

Every exception carries an ``ErrorCode`` so the CLI can report a
machine-readable category and pick an exit status.
"""

from enum import Enum
from typing import Any


class ErrorCode(str, Enum):
    # mesh-core
    EMPTY_SET = "EMPTY_SET"
    DEGENERATE_TET = "DEGENERATE_TET"
    NON_MANIFOLD = "NON_MANIFOLD"
    # delaunay
    DUPLICATE_POINT = "DUPLICATE_POINT"
    OUT_OF_HULL = "OUT_OF_HULL"
    DEGENERATE_INPUT = "DEGENERATE_INPUT"
    # atomistic-mesh
    TOO_FEW_ATOMS = "TOO_FEW_ATOMS"
    MESH_VANISHED = "MESH_VANISHED"
    NO_CONVERGENCE = "NO_CONVERGENCE"
    # continuum-mesh
    BOUNDARY_NOT_RECOVERED = "BOUNDARY_NOT_RECOVERED"
    BUDGET_EXCEEDED = "BUDGET_EXCEEDED"
    BAD_PRECONDITION = "BAD_PRECONDITION"
    # adapt
    NO_SUCH_EDGE = "NO_SUCH_EDGE"
    SWAP_CYCLE = "SWAP_CYCLE"
    CAVITY_FAILED = "CAVITY_FAILED"
    # model
    BAD_GEOMETRY = "BAD_GEOMETRY"
    INVERTED_DEFORMATION = "INVERTED_DEFORMATION"
    DEGENERATE_ELEMENT = "DEGENERATE_ELEMENT"
    STALE_CORRECTION = "STALE_CORRECTION"
    STALL = "STALL"
    # driver
    CONVERGED_OR_DEGENERATE = "CONVERGED_OR_DEGENERATE"
    NO_ATOMISTIC_REGION = "NO_ATOMISTIC_REGION"
    NO_COMMON_REFINEMENT = "NO_COMMON_REFINEMENT"
    PARSE_ERROR = "PARSE_ERROR"
    CONFIG_ERROR = "CONFIG_ERROR"


class AcMeshError(Exception):
    """Base class for all acmesh-architect failures."""

    exit_status = 1

    def __init__(self, code: ErrorCode, message: str = "", details: dict[str, Any] | None = None) -> None:
        self.code = code
        self.details = details or {}
        super().__init__(f"{code.value}: {message}" if message else code.value)

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {"error": self.code.value, "message": str(self)}
        if self.details:
            record["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return record


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return repr(value)


class MeshError(AcMeshError):
    exit_status = 3


class DelaunayError(MeshError):
    pass


class AdaptError(MeshError):
    pass


class ModelError(AcMeshError):
    exit_status = 4


class DriverError(AcMeshError):
    exit_status = 2


class ParseError(AcMeshError):
    """Malformed input file; ``line`` is 1-based when known."""

    exit_status = 5

    def __init__(self, path: str, line: int | None, message: str) -> None:
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(ErrorCode.PARSE_ERROR, f"{where}: {message}", {"path": path, "line": line})
