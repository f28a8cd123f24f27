"""
Local adaptation operators on the coupled mesh: barycentric splits, edge
swaps, continuum refinement, guarded Laplacian smoothing and tet-tet
intersection queries.

All operators work on a ``MeshEditor`` (a mutable copy of a ``TetMesh``) and
hand back a fresh ``TetMesh``. ATOM nodes and tets outside the CONTINUUM
region are never moved or reconnected here.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from acmesh_architect.core.errors import AdaptError, ErrorCode
from acmesh_architect.geometry.interp import build_aabbtree
from acmesh_architect.geometry.mesh import (
    TET_EDGES,
    TET_FACES,
    NodeFlag,
    Region,
    TetMesh,
    element_qualities,
    node_neighbors,
    tet_volumes,
    tets_by_node,
)
from acmesh_architect.geometry.predicates import orient3d
from acmesh_architect.resources.constants import MAX_SWAP_RING, SMOOTH_ROUNDS, SWAP_FACTOR, SWAP_MAX_SWEEPS


class SwapReason(str, Enum):
    QUALITY = "QUALITY"
    PROTECTED = "PROTECTED"
    UNSUPPORTED_RING = "UNSUPPORTED_RING"


@dataclass
class SwapCandidate:
    """Tets around an edge and the closed ring of vertices opposite it."""

    edge: tuple[int, int]
    tets: list[int]
    ring: list[int]


@dataclass
class SwapOutcome:
    swapped: bool
    reason: SwapReason | None = None
    new_tets: list[int] = field(default_factory=list)
    q_before: float = 0.0
    q_after: float = 0.0


# ==============================================================================
# MUTABLE MESH
# ==============================================================================


class MeshEditor:
    """Working copy of a ``TetMesh`` with per-node tet stars."""

    def __init__(self, mesh: TetMesh) -> None:
        assert mesh.region is not None and mesh.node_flags is not None and mesh.site_ids is not None
        self.coords: list[list[float]] = mesh.nodes.tolist()
        self.flags: list[int] = mesh.node_flags.tolist()
        self.site_ids: list[int] = mesh.site_ids.tolist()
        self.tets: list[list[int]] = mesh.tets.tolist()
        self.region: list[int] = mesh.region.tolist()
        self.alive: list[bool] = [True] * len(self.tets)
        self.star: list[set[int]] = [set() for _ in self.coords]
        for t, tet in enumerate(self.tets):
            for v in tet:
                self.star[v].add(t)

    def add_node(self, p: np.ndarray, flag: NodeFlag = NodeFlag.FEM_NODE, site_id: int = -1) -> int:
        self.coords.append([float(x) for x in p])
        self.flags.append(int(flag))
        self.site_ids.append(site_id)
        self.star.append(set())
        return len(self.coords) - 1

    def add_tet(self, verts: list[int], region: int = Region.CONTINUUM) -> int:
        self.tets.append(list(verts))
        self.region.append(int(region))
        self.alive.append(True)
        t = len(self.tets) - 1
        for v in verts:
            self.star[v].add(t)
        return t

    def remove_tet(self, t: int) -> None:
        self.alive[t] = False
        for v in self.tets[t]:
            self.star[v].discard(t)

    def points(self, verts: list[int]) -> np.ndarray:
        return np.array([self.coords[v] for v in verts], dtype=float)

    def quality(self, verts: list[int]) -> float:
        return float(element_qualities(self.points(verts)[None])[0])

    def volume(self, verts: list[int]) -> float:
        return float(tet_volumes(self.points(verts)[None])[0])

    def positive(self, verts: list[int]) -> bool:
        c = self.coords
        return orient3d(c[verts[0]], c[verts[1]], c[verts[2]], c[verts[3]]) > 0

    def edge_tets(self, a: int, b: int) -> list[int]:
        if not (0 <= a < len(self.star) and 0 <= b < len(self.star)):
            return []
        return sorted(self.star[a] & self.star[b])

    def live(self) -> list[int]:
        return [t for t, ok in enumerate(self.alive) if ok]

    def to_mesh(self) -> TetMesh:
        keep = self.live()
        return TetMesh(
            np.asarray(self.coords, dtype=float).reshape(-1, 3),
            np.asarray([self.tets[t] for t in keep], dtype=np.int64).reshape(-1, 4),
            np.asarray([self.region[t] for t in keep], dtype=np.int8),
            np.asarray(self.flags, dtype=np.int8),
            np.asarray(self.site_ids, dtype=np.int64),
        )

    # ------------------------------------------------------------------
    # operators
    # ------------------------------------------------------------------

    def split(self, t: int) -> list[int]:
        """Replace tet t by the 4 tets coning its faces to the barycentre."""
        verts = self.tets[t]
        center = self.points(verts).mean(axis=0)
        b = self.add_node(center)
        region = self.region[t]
        self.remove_tet(t)
        created = []
        for i in range(4):
            child = list(verts)
            child[i] = b
            created.append(self.add_tet(child, region))
        return created

    def swap_candidate(self, a: int, b: int) -> SwapCandidate | SwapReason:
        tets = self.edge_tets(a, b)
        if not tets:
            raise AdaptError(ErrorCode.NO_SUCH_EDGE, f"edge ({a}, {b}) is not in the mesh")
        if any(self.region[t] != Region.CONTINUUM for t in tets):
            return SwapReason.PROTECTED
        if self.flags[a] == NodeFlag.ATOM and self.flags[b] == NodeFlag.ATOM:
            return SwapReason.PROTECTED
        following: dict[int, int] = {}
        for t in tets:
            x, y = (v for v in self.tets[t] if v not in (a, b))
            if self.positive([a, b, x, y]):
                following[x] = y
            else:
                following[y] = x
        start = next(iter(following))
        ring = [start]
        while len(ring) <= len(tets):
            nxt = following.get(ring[-1])
            if nxt is None:
                # open ring: the edge lies on a boundary
                return SwapReason.PROTECTED
            if nxt == start:
                break
            ring.append(nxt)
        if len(ring) != len(tets):
            return SwapReason.PROTECTED
        if not 3 <= len(ring) <= MAX_SWAP_RING:
            return SwapReason.UNSUPPORTED_RING
        return SwapCandidate((a, b), tets, ring)

    def _ring_tets(self, cand: SwapCandidate, i: int, k: int, j: int) -> tuple[list[int], list[int]] | None:
        a, b = cand.edge
        x, y, z = cand.ring[i], cand.ring[k], cand.ring[j]
        for ta, tb in (([x, y, z, a], [x, z, y, b]), ([x, z, y, a], [x, y, z, b])):
            if self.positive(ta) and self.positive(tb):
                return ta, tb
        return None

    def best_retriangulation(self, cand: SwapCandidate) -> tuple[float, list[list[int]]]:
        """Optimal (max-min quality) triangulation of the ring polygon, Klincsek-style DP."""
        n = len(cand.ring)
        memo: dict[tuple[int, int, int], tuple[float, tuple[list[int], list[int]] | None]] = {}

        def triangle(i: int, k: int, j: int) -> tuple[float, tuple[list[int], list[int]] | None]:
            key = (i, k, j)
            if key not in memo:
                pair = self._ring_tets(cand, i, k, j)
                q = -1.0 if pair is None else min(self.quality(pair[0]), self.quality(pair[1]))
                memo[key] = (q, pair)
            return memo[key]

        best = [[np.inf] * n for _ in range(n)]
        choice = [[-1] * n for _ in range(n)]
        for span in range(2, n):
            for i in range(0, n - span):
                j = i + span
                best[i][j] = -1.0
                for k in range(i + 1, j):
                    q = min(best[i][k], best[k][j], triangle(i, k, j)[0])
                    if q > best[i][j]:
                        best[i][j] = q
                        choice[i][j] = k
        if best[0][n - 1] <= 0:
            return -1.0, []

        out: list[list[int]] = []
        stack = [(0, n - 1)]
        while stack:
            i, j = stack.pop()
            if j - i < 2:
                continue
            k = choice[i][j]
            pair = triangle(i, k, j)[1]
            assert pair is not None
            out.extend(pair)
            stack.extend(((i, k), (k, j)))
        return float(best[0][n - 1]), out

    def try_swap(self, a: int, b: int, factor: float = SWAP_FACTOR) -> SwapOutcome:
        cand = self.swap_candidate(a, b)
        if isinstance(cand, SwapReason):
            return SwapOutcome(False, cand)
        q_before = min(self.quality(self.tets[t]) for t in cand.tets)
        q_after, replacement = self.best_retriangulation(cand)
        if not replacement or q_after <= factor * q_before:
            return SwapOutcome(False, SwapReason.QUALITY, q_before=q_before, q_after=max(q_after, 0.0))
        old_volume = sum(self.volume(self.tets[t]) for t in cand.tets)
        new_volume = sum(self.volume(v) for v in replacement)
        if abs(new_volume - old_volume) > 1e-9 * abs(old_volume):
            return SwapOutcome(False, SwapReason.QUALITY, q_before=q_before, q_after=q_after)
        for t in cand.tets:
            self.remove_tet(t)
        created = [self.add_tet(v, Region.CONTINUUM) for v in replacement]
        return SwapOutcome(True, None, created, q_before, q_after)

    def swap_sweeps(self, work: list[int], factor: float = SWAP_FACTOR, max_sweeps: int = SWAP_MAX_SWEEPS) -> int:
        """Swap edges of the worklist tets until no swap fires; returns the number of swaps."""
        swaps = 0
        sweeps = 0
        while work:
            sweeps += 1
            if sweeps > max_sweeps:
                raise AdaptError(ErrorCode.SWAP_CYCLE, f"edge swaps still active after {max_sweeps} sweeps")
            fresh: list[int] = []
            for t in sorted(set(work)):
                for i, j in TET_EDGES:
                    if not self.alive[t]:
                        break
                    if self.region[t] != Region.CONTINUUM:
                        break
                    outcome = self.try_swap(self.tets[t][i], self.tets[t][j], factor)
                    if outcome.swapped:
                        swaps += 1
                        fresh.extend(outcome.new_tets)
            work = fresh
        return swaps


# ==============================================================================
# PUBLIC OPERATORS
# ==============================================================================


def split_barycentric(mesh: TetMesh, t: int) -> TetMesh:
    if not 0 <= t < mesh.n_tets:
        raise AdaptError(ErrorCode.BAD_PRECONDITION, f"tet {t} is not in the mesh")
    editor = MeshEditor(mesh)
    editor.split(t)
    return editor.to_mesh()


def try_edge_swap(mesh: TetMesh, edge: tuple[int, int], factor: float = SWAP_FACTOR) -> tuple[TetMesh, SwapOutcome]:
    editor = MeshEditor(mesh)
    outcome = editor.try_swap(int(edge[0]), int(edge[1]), factor)
    return (editor.to_mesh() if outcome.swapped else mesh), outcome


def refine_continuum(
    mesh: TetMesh,
    marked: list[int] | np.ndarray,
    factor: float = SWAP_FACTOR,
    max_sweeps: int = SWAP_MAX_SWEEPS,
) -> TetMesh:
    """Split every marked CONTINUUM tet at its barycentre, then sweep edge swaps over the new tets."""
    assert mesh.region is not None
    marked = sorted({int(t) for t in marked})
    if not marked:
        return mesh
    bad = [t for t in marked if not 0 <= t < mesh.n_tets or mesh.region[t] != Region.CONTINUUM]
    if bad:
        raise AdaptError(ErrorCode.BAD_PRECONDITION, f"{len(bad)} marked tets are not CONTINUUM tets", {"tets": bad[:20]})
    editor = MeshEditor(mesh)
    work: list[int] = []
    for t in marked:
        work.extend(editor.split(t))
    swaps = editor.swap_sweeps(work, factor, max_sweeps)
    logging.info(f"🔪 Split {len(marked)} continuum tets, {swaps} edge swaps")
    return editor.to_mesh()


def laplacian_smooth(mesh: TetMesh, movable: list[int] | np.ndarray, rounds: int = SMOOTH_ROUNDS) -> TetMesh:
    """
    Move each movable node to the centroid of its edge neighbours.

    A move is kept only if every incident tet stays positively oriented and
    the worst incident quality does not drop.
    """
    assert mesh.node_flags is not None
    nodes = mesh.nodes.copy()
    fixed = (mesh.node_flags == NodeFlag.ATOM) | (mesh.node_flags == NodeFlag.DOMAIN_BOUNDARY)
    star = tets_by_node(mesh.tets, mesh.n_nodes)
    nbrs = node_neighbors(mesh.tets, mesh.n_nodes)
    candidates = sorted(int(v) for v in set(np.asarray(movable, dtype=np.int64).tolist()) if not fixed[v] and star[v])
    scale = float(np.linalg.norm(nodes.max(axis=0) - nodes.min(axis=0))) if mesh.n_nodes else 1.0
    moved = 0
    for _ in range(rounds):
        for v in candidates:
            target = nodes[sorted(nbrs[v])].mean(axis=0)
            if np.linalg.norm(target - nodes[v]) <= 1e-14 * scale:
                continue
            incident = mesh.tets[star[v]]
            q_old = element_qualities(nodes[incident]).min()
            saved = nodes[v].copy()
            nodes[v] = target
            pts = nodes[incident]
            ok = all(orient3d(*p) > 0 for p in pts) and element_qualities(pts).min() >= q_old
            if ok:
                moved += 1
            else:
                nodes[v] = saved
    logging.debug(f"laplacian_smooth: {moved} accepted moves over {len(candidates)} nodes")
    return TetMesh(nodes, mesh.tets, mesh.region, mesh.node_flags, mesh.site_ids)


# ==============================================================================
# INTERSECTION
# ==============================================================================


def _sat_axes(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    edges_p = np.array([p[j] - p[i] for i, j in TET_EDGES])
    edges_q = np.array([q[j] - q[i] for i, j in TET_EDGES])
    normals_p = np.array([np.cross(p[f[1]] - p[f[0]], p[f[2]] - p[f[0]]) for f in TET_FACES])
    normals_q = np.array([np.cross(q[f[1]] - q[f[0]], q[f[2]] - q[f[0]]) for f in TET_FACES])
    crosses = np.cross(edges_p[:, None, :], edges_q[None, :, :]).reshape(-1, 3)
    axes = np.vstack([normals_p, normals_q, crosses])
    norms = np.linalg.norm(axes, axis=1)
    scale = max(float(np.abs(edges_p).max()), float(np.abs(edges_q).max()), 1e-300) ** 2
    keep = norms > 1e-12 * scale
    return axes[keep] / norms[keep, None]


def tets_intersect(p: np.ndarray, q: np.ndarray, tol: float = 0.0) -> bool:
    """Separating-axis test for two closed tets; touching counts as intersecting."""
    axes = _sat_axes(np.asarray(p, dtype=float), np.asarray(q, dtype=float))
    proj_p = np.asarray(p) @ axes.T
    proj_q = np.asarray(q) @ axes.T
    separated = (proj_p.max(axis=0) < proj_q.min(axis=0) - tol) | (proj_q.max(axis=0) < proj_p.min(axis=0) - tol)
    return not bool(np.any(separated))


def tets_intersecting(continuum: TetMesh, atomistic: TetMesh, tol: float | None = None) -> np.ndarray:
    """Indices of ``continuum`` tets whose closed hull meets the closed hull of some ``atomistic`` tet."""
    if continuum.n_tets == 0 or atomistic.n_tets == 0:
        return np.zeros(0, dtype=np.int64)
    if tol is None:
        span = np.linalg.norm(atomistic.nodes.max(axis=0) - atomistic.nodes.min(axis=0))
        tol = 1e-9 * float(span)
    tree = build_aabbtree(atomistic)
    pts_c = continuum.tet_points()
    pts_a = atomistic.tet_points()
    hits = []
    for t, p in enumerate(pts_c):
        for s in tree.candidates_box(p.min(axis=0), p.max(axis=0), slack=tol):
            if tets_intersect(p, pts_a[s], tol):
                hits.append(t)
                break
    return np.asarray(hits, dtype=np.int64)
