"""
Canonical atomistic mesh: Delaunay tetrahedralization of the atoms peeled of
oversized boundary elements.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from acmesh_architect.core.errors import ErrorCode, MeshError
from acmesh_architect.geometry.delaunay import triangulate
from acmesh_architect.geometry.mesh import TET_FACES, NodeFlag, Region, TetMesh, circumradii, face_key
from acmesh_architect.resources.constants import DELETION_MAX_ROUNDS, RMAX_MULTIPLIER


@dataclass
class DeletionParams:
    r_max: float
    max_rounds: int = DELETION_MAX_ROUNDS

    def __post_init__(self) -> None:
        if not self.r_max > 0:
            raise MeshError(ErrorCode.BAD_PRECONDITION, f"r_max must be positive, got {self.r_max}")


@dataclass
class DeletionResult:
    mesh: TetMesh
    deleted_rounds: list[list[int]] = field(default_factory=list)
    boundary_rounds: list[list[int]] = field(default_factory=list)
    orphans: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_deleted(self) -> int:
        return sum(len(r) for r in self.deleted_rounds)


def compute_rmax(atoms: np.ndarray, c_r: float = RMAX_MULTIPLIER) -> float:
    """c_r times the largest nearest-neighbour distance among the atoms."""
    atoms = np.asarray(atoms, dtype=float).reshape(-1, 3)
    if len(atoms) < 2:
        raise MeshError(ErrorCode.TOO_FEW_ATOMS, f"need at least 2 atoms, got {len(atoms)}")
    dist, _ = cKDTree(atoms).query(atoms, k=2)
    return float(c_r * dist[:, 1].max())


def boundary_adjacent(tets: np.ndarray, alive: np.ndarray, faces: dict[tuple[int, int, int], list[int]]) -> np.ndarray:
    """Alive tets sharing at least one face with the boundary of the alive set."""
    out = np.zeros(len(tets), dtype=bool)
    for t in np.flatnonzero(alive):
        tet = tets[t]
        for f in TET_FACES:
            owners = faces[face_key(tet[f[0]], tet[f[1]], tet[f[2]])]
            if not any(o != t and alive[o] for o in owners):
                out[t] = True
                break
    return out


def delete_elements(mesh: TetMesh, params: DeletionParams) -> DeletionResult:
    """
    Repeatedly delete boundary-adjacent tets whose circumradius exceeds r_max.

    Stops when a round deletes nothing. Node coordinates are never touched;
    atoms that lose every incident tet are reported as orphans.
    """
    assert mesh.region is not None
    faces = mesh.face_adjacency.faces
    radii = circumradii(mesh.tet_points()) if mesh.n_tets else np.zeros(0)
    alive = np.ones(mesh.n_tets, dtype=bool)
    result = DeletionResult(mesh)
    for _ in range(params.max_rounds):
        candidates = boundary_adjacent(mesh.tets, alive, faces)
        doomed = np.flatnonzero(candidates & (radii > params.r_max))
        if len(doomed) == 0:
            break
        result.boundary_rounds.append(np.flatnonzero(candidates).tolist())
        result.deleted_rounds.append(doomed.tolist())
        alive[doomed] = False
        if not alive.any():
            raise MeshError(ErrorCode.MESH_VANISHED, f"every tet was deleted with r_max={params.r_max:.4g}")
    else:
        raise MeshError(ErrorCode.NO_CONVERGENCE, f"deletion still active after {params.max_rounds} rounds")

    kept = mesh.select(alive)
    used = np.zeros(mesh.n_nodes, dtype=bool)
    used[np.unique(mesh.tets)] = True
    still = np.zeros(mesh.n_nodes, dtype=bool)
    still[np.unique(kept.tets)] = True
    result.mesh = kept
    result.orphans = np.flatnonzero(used & ~still)
    if result.n_deleted:
        logging.info(
            f"🪓 Deleted {result.n_deleted} boundary tets in {len(result.deleted_rounds)} rounds "
            f"({len(result.orphans)} orphaned atoms)"
        )
    return result


def build_atomistic_mesh(
    atoms: np.ndarray,
    site_ids: np.ndarray | None = None,
    r_max: float | None = None,
    c_r: float = RMAX_MULTIPLIER,
    seed: int = 0,
) -> DeletionResult:
    """Triangulate the atoms and peel the result into the canonical atomistic mesh."""
    atoms = np.asarray(atoms, dtype=float).reshape(-1, 3)
    pre = triangulate(atoms, seed)
    pre.node_flags = np.full(len(atoms), NodeFlag.ATOM, dtype=np.int8)
    pre.region = np.full(pre.n_tets, Region.ATOMISTIC, dtype=np.int8)
    if site_ids is not None:
        pre.site_ids = np.asarray(site_ids, dtype=np.int64)
    cap = compute_rmax(atoms, c_r) if r_max is None else r_max
    return delete_elements(pre, DeletionParams(cap))
