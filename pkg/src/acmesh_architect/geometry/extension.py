"""
Atomistic region extension: absorb marked lattice sites into the atomistic
mesh and remesh the continuum cavity around it.

The new atomistic mesh is always rebuilt from scratch on the union atom set
(sorted by site id), so it is identical to a fresh generation. Only the
continuum tets touching it are replaced; the rest of the continuum mesh is
kept and the fusion band is smoothed.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from acmesh_architect.core.errors import AdaptError, ErrorCode, MeshError
from acmesh_architect.geometry.adapt import laplacian_smooth, tets_intersecting
from acmesh_architect.geometry.atomistic import build_atomistic_mesh
from acmesh_architect.geometry.continuum import ATOM_REGIONS, mesh_between
from acmesh_architect.geometry.mesh import (
    NodeFlag,
    Region,
    SurfaceMesh,
    TetMesh,
    extract_boundary,
    node_neighbors,
    node_tolerance,
    tet_volumes,
    validate,
)
from acmesh_architect.geometry.predicates import insphere_sign, orient3d
from acmesh_architect.resources.constants import RMAX_MULTIPLIER, SMOOTH_BAND_HOPS, SMOOTH_ROUNDS

CAVITY_GROWTH_ROUNDS = 20


@dataclass
class ExtensionRequest:
    """Lattice sites to absorb into the atomistic region."""

    positions: np.ndarray
    site_ids: np.ndarray
    layers: int = 1

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.site_ids = np.asarray(self.site_ids, dtype=np.int64).reshape(-1)
        if len(self.positions) != len(self.site_ids):
            raise AdaptError(ErrorCode.BAD_PRECONDITION, "marked positions and site ids differ in length")
        if self.layers < 1:
            raise AdaptError(ErrorCode.BAD_PRECONDITION, f"layers must be >= 1, got {self.layers}")


@dataclass
class ExtensionResult:
    mesh: TetMesh
    absorbed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cavity_tets: int = 0
    band_nodes: int = 0


def current_atoms(mesh: TetMesh) -> tuple[np.ndarray, np.ndarray]:
    """(positions, site ids) of the ATOM nodes, sorted by site id."""
    assert mesh.node_flags is not None and mesh.site_ids is not None
    idx = np.flatnonzero(mesh.node_flags == NodeFlag.ATOM)
    order = idx[np.argsort(mesh.site_ids[idx], kind="stable")]
    return mesh.nodes[order], mesh.site_ids[order]


def union_atoms(mesh: TetMesh, request: ExtensionRequest) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Union atom set sorted by site id, plus the absorbed and skipped marked site ids."""
    positions, ids = current_atoms(mesh)
    known = set(ids.tolist())
    eps = node_tolerance(np.vstack([positions, request.positions])) if len(positions) else 0.0
    tree = cKDTree(positions) if len(positions) else None
    fresh: list[int] = []
    skipped: list[int] = []
    seen: set[int] = set()
    for k, (p, s) in enumerate(zip(request.positions, request.site_ids.tolist())):
        duplicate = s in known or s in seen
        if not duplicate and tree is not None:
            duplicate = bool(tree.query(p)[0] <= eps)
        if duplicate:
            skipped.append(s)
            continue
        seen.add(s)
        fresh.append(k)
    all_pos = np.vstack([positions, request.positions[fresh]])
    all_ids = np.concatenate([ids, request.site_ids[fresh]])
    order = np.argsort(all_ids, kind="stable")
    return all_pos[order], all_ids[order], request.site_ids[fresh], np.asarray(skipped, dtype=np.int64)


def _circumsphere_contains(p: np.ndarray, points: np.ndarray) -> bool:
    a = p[1:] - p[0]
    try:
        center = p[0] + np.linalg.solve(a, 0.5 * np.einsum("ij,ij->i", a, a))
    except np.linalg.LinAlgError:
        return True
    radius = float(np.linalg.norm(center - p[0]))
    near = np.flatnonzero(np.linalg.norm(points - center, axis=1) <= radius * (1 + 1e-9))
    if len(near) == 0:
        return False
    sign = orient3d(*p)
    return any(insphere_sign(*p, points[k]) * sign > 0 for k in near)


def _grow_cavity(mesh: TetMesh, continuum: np.ndarray, removed: set[int], atoms: np.ndarray) -> set[int]:
    """
    Add continuum tets next to the cavity whose circumsphere strictly holds a
    new atom or a cavity boundary node, so that the cavity faces have a better
    chance of being Delaunay faces of the remesh point set.
    """
    adjacency = mesh.face_adjacency
    in_cavity = np.zeros(mesh.n_tets, dtype=bool)
    in_cavity[~continuum] = True
    in_cavity[list(removed)] = True
    for _ in range(CAVITY_GROWTH_ROUNDS):
        boundary_tets: set[int] = set()
        boundary_nodes: set[int] = set()
        for key, owners in adjacency.faces.items():
            if len(owners) == 2 and in_cavity[owners[0]] != in_cavity[owners[1]]:
                outside = owners[1] if in_cavity[owners[0]] else owners[0]
                boundary_tets.add(outside)
                boundary_nodes.update(key)
        if not boundary_tets:
            break
        witnesses = np.vstack([atoms, mesh.nodes[sorted(boundary_nodes)]])
        grown = [t for t in sorted(boundary_tets) if _circumsphere_contains(mesh.nodes[mesh.tets[t]], witnesses)]
        if not grown:
            break
        in_cavity[grown] = True
        removed.update(grown)
    return removed


def extend_atomistic(
    mesh: TetMesh,
    request: ExtensionRequest,
    c_r: float = RMAX_MULTIPLIER,
    smooth_rounds: int = SMOOTH_ROUNDS,
    band_hops: int = SMOOTH_BAND_HOPS,
    seed: int = 0,
) -> ExtensionResult:
    """
    Rebuild the atomistic mesh on the union atom set, cut the continuum tets
    that meet it, mesh the cavity between the cut surface and the new
    atomistic surface, fuse and smooth the band around the fused faces.
    """
    assert mesh.region is not None and mesh.node_flags is not None
    positions, site_ids, absorbed, skipped = union_atoms(mesh, request)
    if len(skipped):
        logging.warning(f"⚠️ {len(skipped)} marked sites are already atoms and were ignored (first: {skipped[:10].tolist()})")
    if len(absorbed) == 0:
        return ExtensionResult(mesh, absorbed, skipped)

    atomistic = build_atomistic_mesh(positions, site_ids, c_r=c_r, seed=seed).mesh
    continuum = mesh.region == Region.CONTINUUM
    cont_idx = np.flatnonzero(continuum)
    hit = tets_intersecting(mesh.select(continuum), atomistic)
    removed = _grow_cavity(mesh, continuum, {int(cont_idx[k]) for k in hit}, positions)

    cavity_mask = ~continuum
    cavity_mask[list(removed)] = True
    cavity = extract_boundary(mesh.select(cavity_mask))
    try:
        cm = mesh_between(SurfaceMesh(mesh.nodes, cavity.triangles), atomistic, None, seed, 0, convex_outer=False)
    except MeshError as exc:
        raise AdaptError(ErrorCode.CAVITY_FAILED, f"cavity remesh failed: {exc}", {"cause": exc.code.value}) from exc

    # renumber the kept part of the old mesh onto the cavity mesh's node array
    keep = continuum & ~cavity_mask
    kept_tets = mesh.tets[keep]
    old_to_new = np.full(mesh.n_nodes, -1, dtype=np.int64)
    mapped = cm.outer_map >= 0
    old_to_new[np.flatnonzero(mapped)] = cm.outer_map[mapped]
    extra = [v for v in np.unique(kept_tets).tolist() if old_to_new[v] < 0]
    old_to_new[extra] = cm.n_nodes + np.arange(len(extra))
    nodes = np.vstack([cm.nodes, mesh.nodes[extra]])
    flags = np.concatenate([cm.node_flags, mesh.node_flags[extra]])
    flags[: cm.n_inner] = NodeFlag.ATOM
    # cavity surface nodes keep their old role
    surface_old = np.flatnonzero(mapped)
    surface_new = cm.outer_map[surface_old]
    own = surface_new >= cm.n_inner
    flags[surface_new[own]] = mesh.node_flags[surface_old[own]]
    ids = np.full(len(nodes), -1, dtype=np.int64)
    ids[: cm.n_inner] = atomistic.site_ids
    tets = np.vstack([atomistic.tets, cm.tets, old_to_new[kept_tets]])
    region = np.concatenate(
        [
            np.full(atomistic.n_tets, Region.ATOMISTIC, dtype=np.int8),
            np.full(len(cm.tets) + len(kept_tets), Region.CONTINUUM, dtype=np.int8),
        ]
    )
    fused = TetMesh(nodes, tets, region, flags, ids)

    before = float(tet_volumes(mesh.tet_points()).sum())
    after = float(tet_volumes(fused.tet_points()).sum())
    if abs(after - before) > 1e-8 * abs(before):
        raise AdaptError(ErrorCode.CAVITY_FAILED, f"fused mesh volume {after:.6g} differs from {before:.6g}")
    report = validate(fused)
    if not report.ok:
        raise AdaptError(ErrorCode.CAVITY_FAILED, f"fused mesh is invalid: {sorted(report.kinds())}")

    band = fusion_band(fused, {int(v) for tri in cm.outer_map[cavity.triangles].tolist() for v in tri}, band_hops)
    smoothed = laplacian_smooth(fused, band, smooth_rounds)
    logging.info(
        f"🧬 Absorbed {len(absorbed)} atoms; cavity of {int(cavity_mask.sum())} tets remeshed "
        f"into {len(cm.tets)} continuum tets"
    )
    return ExtensionResult(smoothed, absorbed, skipped, int(len(removed)), len(band))


def fusion_band(mesh: TetMesh, seeds: set[int], hops: int) -> list[int]:
    """Nodes within ``hops`` edge hops of the seed nodes."""
    nbrs = node_neighbors(mesh.tets, mesh.n_nodes)
    band = set(seeds)
    frontier = set(seeds)
    for _ in range(hops):
        frontier = {w for v in frontier for w in nbrs[v]} - band
        band |= frontier
    return sorted(band)


def atomistic_submesh(mesh: TetMesh) -> TetMesh:
    """Atom tets of a coupled mesh, compacted to their own nodes."""
    assert mesh.region is not None
    return mesh.select(np.isin(mesh.region, [int(r) for r in ATOM_REGIONS])).compact()
