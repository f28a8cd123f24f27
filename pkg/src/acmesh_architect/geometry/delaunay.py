"""
Incremental 3D Delaunay triangulation (Bowyer-Watson).

Points are inserted in BRIO order: randomized rounds of geometrically growing
size, Hilbert-curve order within each round. The convex hull is closed by a
single symbolic vertex at infinity (``INF``) so every hull face carries a
ghost tetrahedron; ghosts never enter metric predicates and are dropped from
the returned mesh.
"""

import logging
import random
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from acmesh_architect.core.errors import DelaunayError, ErrorCode
from acmesh_architect.geometry.mesh import NodeFlag, TetMesh, face_key, node_tolerance
from acmesh_architect.geometry.predicates import PredicateKernel

INF = -1
BOUNDARY = -2
HILBERT_BITS = 10


@dataclass
class InsertionOrder:
    permutation: np.ndarray
    round_sizes: list[int]

    def rounds(self) -> list[np.ndarray]:
        bounds = np.cumsum([0, *self.round_sizes])
        return [self.permutation[bounds[i] : bounds[i + 1]] for i in range(len(self.round_sizes))]


@dataclass
class Cavity:
    tets: list[int]
    boundary: list[tuple[int, int]] = field(default_factory=list)
    hull_grows: bool = False


# ==============================================================================
# BRIO ORDERING
# ==============================================================================


def hilbert_keys(points: np.ndarray, bits: int = HILBERT_BITS) -> np.ndarray:
    """3D Hilbert index of each point on a 2^bits grid over the bounding box."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    lo = points.min(axis=0)
    span = float((points.max(axis=0) - lo).max()) or 1.0
    top = (1 << bits) - 1
    x = np.clip(((points - lo) / span * top).round(), 0, top).astype(np.uint64)

    # Skilling's axes-to-transpose
    m = np.uint64(1 << (bits - 1))
    q = m
    while q > 1:
        p = q - np.uint64(1)
        for i in range(3):
            has_bit = (x[:, i] & q) != 0
            x[has_bit, 0] ^= p
            swap = ~has_bit
            t = (x[swap, 0] ^ x[swap, i]) & p
            x[swap, 0] ^= t
            x[swap, i] ^= t
        q >>= np.uint64(1)
    for i in range(1, 3):
        x[:, i] ^= x[:, i - 1]
    t = np.zeros(len(x), dtype=np.uint64)
    q = m
    while q > 1:
        t[(x[:, 2] & q) != 0] ^= q - np.uint64(1)
        q >>= np.uint64(1)
    x ^= t[:, None]

    key = np.zeros(len(x), dtype=np.uint64)
    for b in range(bits - 1, -1, -1):
        for i in range(3):
            key = (key << np.uint64(1)) | ((x[:, i] >> np.uint64(b)) & np.uint64(1))
    return key


def brio_sort(points: np.ndarray, seed: int = 0, ratio: float = 2.0) -> InsertionOrder:
    """Biased randomized insertion order, deterministic for a fixed seed."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if n <= 1:
        return InsertionOrder(np.arange(n), [n] if n else [])
    rng = np.random.default_rng(seed)
    n_rounds = max(1, int(np.ceil(np.log(n) / np.log(ratio))))
    # level k (counted from the last round) is chosen with probability ratio^-k (1 - 1/ratio)
    u = 1.0 - rng.random(n)
    level = np.minimum(np.floor(-np.log(u) / np.log(ratio)).astype(int), n_rounds - 1)
    keys = hilbert_keys(points)
    permutation = []
    sizes = []
    for lv in range(n_rounds - 1, -1, -1):
        members = np.flatnonzero(level == lv)
        if len(members) == 0:
            continue
        members = members[np.lexsort((members, keys[members]))]
        permutation.append(members)
        sizes.append(len(members))
    return InsertionOrder(np.concatenate(permutation), sizes)


# ==============================================================================
# TRIANGULATION
# ==============================================================================


class DelaunayTriangulation:
    """
    Mutable tetrahedralization with neighbor links.

    ``tv[t]`` holds the 4 vertices of tet t (``INF`` for ghosts) and ``tn[t][i]``
    the tet across the face opposite vertex i (``BOUNDARY`` when the
    triangulation was imported from a mesh and the face is on its boundary).
    Finite tets are positively oriented; a ghost is positively oriented when
    replacing ``INF`` by a point beyond its hull face gives a positive tet.
    """

    def __init__(self, kernel: PredicateKernel, seed: int = 0) -> None:
        self.kernel = kernel
        self.tv: list[list[int]] = []
        self.tn: list[list[int]] = []
        self.alive: list[bool] = []
        self.last = -1
        self.vertex_tet: dict[int, int] = {}
        self._rng = random.Random(seed)
        self.inserted = 0

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def _new_tet(self, verts: list[int]) -> int:
        self.tv.append(verts)
        self.tn.append([BOUNDARY, BOUNDARY, BOUNDARY, BOUNDARY])
        self.alive.append(True)
        t = len(self.tv) - 1
        for v in verts:
            if v != INF:
                self.vertex_tet[v] = t
        return t

    def _collinear(self, i: int, j: int, k: int) -> bool:
        a, b, c = (self.kernel._exact(n) for n in (i, j, k))
        u = (b[0] - a[0], b[1] - a[1], b[2] - a[2])
        w = (c[0] - a[0], c[1] - a[1], c[2] - a[2])
        return u[1] * w[2] - u[2] * w[1] == 0 and u[2] * w[0] - u[0] * w[2] == 0 and u[0] * w[1] - u[1] * w[0] == 0

    def bootstrap(self, order: Sequence[int]) -> list[int]:
        """Create the first finite tet plus its 4 ghosts; returns the remaining insertion order."""
        order = [int(v) for v in order]
        if len(order) < 4:
            raise DelaunayError(ErrorCode.DEGENERATE_INPUT, f"need 4 affinely independent points, got {len(order)}")
        p0 = order[0]
        p1 = next((v for v in order if not self.kernel.same_point(v, p0)), None)
        p2 = None if p1 is None else next((v for v in order if not self._collinear(p0, p1, v)), None)
        p3 = None
        if p2 is not None:
            p3 = next((v for v in order if self.kernel.orient(p0, p1, p2, v) != 0), None)
        if p1 is None or p2 is None or p3 is None:
            raise DelaunayError(ErrorCode.DEGENERATE_INPUT, "all points are coplanar")
        if self.kernel.orient(p0, p1, p2, p3) < 0:
            p0, p1 = p1, p0
        base = self._new_tet([p0, p1, p2, p3])
        ghosts = []
        for i in range(4):
            verts = [p0, p1, p2, p3]
            verts[i] = INF
            # flip two finite entries so INF sits on the positive side
            a, b = [k for k in range(4) if k != i][:2]
            verts[a], verts[b] = verts[b], verts[a]
            ghosts.append(self._new_tet(verts))
        for i, g in enumerate(ghosts):
            self.tn[base][i] = g
            self.tn[g][self.tv[g].index(INF)] = base
        for g in ghosts:
            for h in ghosts:
                if g == h:
                    continue
                shared = set(self.tv[g]) & set(self.tv[h])
                if len(shared) == 3:
                    (missing,) = set(self.tv[g]) - shared
                    self.tn[g][self.tv[g].index(missing)] = h
        self.last = base
        self.inserted = 4
        chosen = {p0, p1, p2, p3}
        return [v for v in order if v not in chosen]

    @classmethod
    def from_mesh(cls, mesh: TetMesh, seed: int = 0) -> "DelaunayTriangulation":
        dt = cls(PredicateKernel(mesh.nodes), seed)
        for tet in mesh.tets.tolist():
            dt._new_tet([int(v) for v in tet])
        adjacency = mesh.face_adjacency
        for t, tet in enumerate(dt.tv):
            for i in range(4):
                f = [tet[k] for k in range(4) if k != i]
                owners = adjacency.faces[face_key(*f)]
                others = [o for o in owners if o != t]
                dt.tn[t][i] = others[0] if others else BOUNDARY
        dt.last = 0 if dt.tv else -1
        dt.inserted = mesh.n_nodes
        return dt

    # ------------------------------------------------------------------
    # point location
    # ------------------------------------------------------------------

    def _start_tet(self) -> int:
        t = self.last
        if 0 <= t < len(self.tv) and self.alive[t] and INF not in self.tv[t]:
            return t
        for t in range(len(self.tv) - 1, -1, -1):
            if self.alive[t] and INF not in self.tv[t]:
                return t
        raise DelaunayError(ErrorCode.DEGENERATE_INPUT, "triangulation has no finite tets")

    def locate(self, v: int, start: int | None = None) -> int:
        """Remembering stochastic walk from ``start`` (default: the last created tet)."""
        t = self._start_tet() if start is None else start
        previous = -1
        orient = self.kernel.orient
        for _ in range(10 * len(self.tv) + 100):
            tet = self.tv[t]
            if INF in tet:
                return t
            offset = self._rng.randrange(4)
            moved = False
            for k in range(4):
                i = (offset + k) % 4
                nb = self.tn[t][i]
                if nb == previous:
                    continue
                swapped = tet.copy()
                swapped[i] = v
                if orient(*swapped) < 0:
                    if nb == BOUNDARY:
                        raise DelaunayError(ErrorCode.OUT_OF_HULL, f"point {self.kernel.coords[v]} lies outside the mesh")
                    previous, t = t, nb
                    moved = True
                    break
            if not moved:
                # the face we came through was skipped; confirm it too
                if previous >= 0:
                    i = self.tn[t].index(previous)
                    swapped = tet.copy()
                    swapped[i] = v
                    if orient(*swapped) < 0:
                        previous, t = t, previous
                        continue
                return t
        raise DelaunayError(ErrorCode.DEGENERATE_INPUT, "point location walk did not terminate")

    # ------------------------------------------------------------------
    # insertion
    # ------------------------------------------------------------------

    def in_conflict(self, t: int, v: int) -> bool:
        tet = self.tv[t]
        if INF in tet:
            k = tet.index(INF)
            swapped = tet.copy()
            swapped[k] = v
            o = self.kernel.orient(*swapped)
            if o != 0:
                return o > 0
            # coplanar with the hull face: follow the finite neighbor's sphere
            return self.kernel.insphere_perturbed(self.tv[self.tn[t][k]], v) > 0
        return self.kernel.insphere_perturbed(tet, v) > 0

    def find_cavity(self, v: int, seed_tet: int) -> Cavity:
        cavity = Cavity([seed_tet])
        member = {seed_tet}
        stack = [seed_tet]
        while stack:
            t = stack.pop()
            if INF in self.tv[t]:
                cavity.hull_grows = True
            for i, nb in enumerate(self.tn[t]):
                if nb in member:
                    continue
                if nb != BOUNDARY and self.in_conflict(nb, v):
                    member.add(nb)
                    cavity.tets.append(nb)
                    stack.append(nb)
                else:
                    cavity.boundary.append((t, i))
        return cavity

    def insert(
        self,
        v: int,
        protected: set[tuple[int, ...]] | None = None,
        allow_hull_growth: bool = True,
    ) -> list[int] | None:
        """
        Insert kernel vertex ``v``; returns the new tets.

        Returns None (leaving the triangulation unchanged) when the cavity would
        destroy a ``protected`` tet or, with ``allow_hull_growth=False``, a ghost.
        """
        seed_tet = self.locate(v)
        tet = self.tv[seed_tet]
        for u in tet:
            if u != INF and self.kernel.same_point(u, v):
                raise DelaunayError(ErrorCode.DUPLICATE_POINT, f"point {self.kernel.coords[v]} duplicates node {u}")
        if INF in tet and not allow_hull_growth:
            return None
        cavity = self.find_cavity(v, seed_tet)
        if cavity.hull_grows and not allow_hull_growth:
            return None
        if protected:
            for t in cavity.tets:
                if tuple(sorted(self.tv[t])) in protected:
                    return None
        return self._retriangulate(v, cavity)

    def _retriangulate(self, v: int, cavity: Cavity) -> list[int]:
        created = []
        open_edges: dict[tuple[int, int], tuple[int, int]] = {}
        for t, i in cavity.boundary:
            verts = self.tv[t].copy()
            verts[i] = v
            nt = self._new_tet(verts)
            created.append(nt)
            outside = self.tn[t][i]
            self.tn[nt][i] = outside
            if outside != BOUNDARY:
                self.tn[outside][self.tn[outside].index(t)] = nt
            for j in range(4):
                if j == i:
                    continue
                edge = tuple(sorted(verts[k] for k in range(4) if k not in (i, j)))
                key = (edge[0], edge[1])
                # face opposite j contains v and this edge
                if key in open_edges:
                    other, oj = open_edges.pop(key)
                    self.tn[nt][j] = other
                    self.tn[other][oj] = nt
                else:
                    open_edges[key] = (nt, j)
        if open_edges:
            raise DelaunayError(ErrorCode.DEGENERATE_INPUT, f"cavity boundary is not closed ({len(open_edges)} open)")
        for t in cavity.tets:
            self.alive[t] = False
        finite = [t for t in created if INF not in self.tv[t]]
        self.last = finite[0] if finite else self.last
        self.vertex_tet[v] = self.last
        self.inserted += 1
        return created

    def insert_many(self, vertices: Iterable[int]) -> None:
        for v in vertices:
            self.insert(v)

    # ------------------------------------------------------------------
    # export
    # ------------------------------------------------------------------

    def live_tets(self) -> list[int]:
        return [t for t, ok in enumerate(self.alive) if ok and INF not in self.tv[t]]

    def finite_tets(self) -> np.ndarray:
        tets = [self.tv[t] for t in self.live_tets()]
        return np.asarray(tets, dtype=np.int64).reshape(-1, 4)

    def hull_faces(self) -> list[tuple[int, int, int]]:
        faces = []
        for t, ok in enumerate(self.alive):
            if ok and INF in self.tv[t]:
                faces.append(tuple(v for v in self.tv[t] if v != INF))
        return faces  # type: ignore[return-value]

    def nodes(self) -> np.ndarray:
        return np.asarray(self.kernel.coords, dtype=float).reshape(-1, 3)


def canonical_tet_order(tets: np.ndarray) -> np.ndarray:
    """Sort tets by their sorted vertex tuple (orientation kept)."""
    if len(tets) == 0:
        return tets
    keys = np.sort(tets, axis=1)
    return tets[np.lexsort(keys.T[::-1])]


def check_duplicates(points: np.ndarray, eps: float | None = None) -> None:
    if len(points) < 2:
        return
    tol = node_tolerance(points) if eps is None else eps
    pairs = cKDTree(points).query_pairs(max(tol, 1e-300))
    if pairs:
        i, j = min(pairs)
        raise DelaunayError(ErrorCode.DUPLICATE_POINT, f"points {i} and {j} coincide", {"pairs": sorted(pairs)[:20]})


def build_triangulation(points: np.ndarray, seed: int = 0) -> DelaunayTriangulation:
    """Delaunay triangulation object of ``points`` (indices preserved)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    check_duplicates(points)
    dt = DelaunayTriangulation(PredicateKernel(points), seed)
    order = brio_sort(points, seed)
    rest = dt.bootstrap(order.permutation)
    dt.insert_many(rest)
    logging.debug(f"delaunay: {len(points)} points, {dt.kernel.exact_calls} exact predicate calls")
    return dt


def triangulate(points: np.ndarray, seed: int = 0) -> TetMesh:
    """Delaunay tetrahedralization of the convex hull of ``points``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    dt = build_triangulation(points, seed)
    tets = canonical_tet_order(dt.finite_tets())
    return TetMesh(points, tets)


def insert_point(mesh: TetMesh, p: Sequence[float], flag: NodeFlag = NodeFlag.FEM_NODE) -> TetMesh:
    """Bowyer-Watson insertion of ``p`` into a finished mesh (cavity bounded by the mesh boundary)."""
    assert mesh.region is not None and mesh.node_flags is not None and mesh.site_ids is not None
    p = np.asarray(p, dtype=float)
    eps = node_tolerance(np.vstack([mesh.nodes, p]))
    dist, nearest = cKDTree(mesh.nodes).query(p)
    if dist <= eps:
        raise DelaunayError(ErrorCode.DUPLICATE_POINT, f"point {p.tolist()} coincides with node {int(nearest)}")
    dt = DelaunayTriangulation.from_mesh(mesh)
    start = next(t for t, tet in enumerate(dt.tv) if int(nearest) in tet)
    v = dt.kernel.add_point(p)
    seed_tet = dt.locate(v, start)
    cavity = dt.find_cavity(v, seed_tet)
    created = dt._retriangulate(v, cavity)
    for t in created:
        if dt.kernel.orient(*dt.tv[t]) <= 0:
            raise DelaunayError(ErrorCode.OUT_OF_HULL, f"cavity of {p.tolist()} is not star-shaped from the point")

    origin = {nt: mesh.region[t] for nt, (t, _) in zip(created, cavity.boundary)}
    alive = [t for t in range(len(dt.tv)) if dt.alive[t]]
    region = np.array([mesh.region[t] if t < mesh.n_tets else origin[t] for t in alive], dtype=np.int8)
    tets = np.asarray([dt.tv[t] for t in alive], dtype=np.int64)
    return TetMesh(
        np.vstack([mesh.nodes, p]),
        tets,
        region,
        np.append(mesh.node_flags, np.int8(flag)),
        np.append(mesh.site_ids, -1),
    )
