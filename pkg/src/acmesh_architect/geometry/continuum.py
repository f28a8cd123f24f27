"""
Continuum mesh generation: domain boundary seeding, a Delaunay shell mesh
between the domain boundary and the atomistic surface, and quality/grading
refinement by circumcentre insertion.

The shell mesh is the Delaunay triangulation of the atom nodes (indices
first) followed by the boundary and interior nodes. Every atomistic tet is a
Delaunay tet of the atoms, so it survives in the combined triangulation as
long as no later node lies strictly inside its circumsphere; conflicting
interior nodes are dropped until that holds. When that fails, the shell is
built by radial layering from the atomistic surface instead.
"""

import logging
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import cKDTree

from acmesh_architect.core.errors import DelaunayError, ErrorCode, MeshError
from acmesh_architect.geometry.adapt import MeshEditor
from acmesh_architect.geometry.delaunay import DelaunayTriangulation, build_triangulation, canonical_tet_order
from acmesh_architect.geometry.mesh import (
    TET_FACES,
    NodeFlag,
    Region,
    SurfaceMesh,
    TetMesh,
    edge_key,
    element_qualities,
    extract_boundary,
    face_key,
    longest_edges,
    node_tolerance,
    points_inside_surface,
    tet_volumes,
)
from acmesh_architect.geometry.predicates import PredicateKernel, orient3d
from acmesh_architect.resources.constants import GRADING, NODE_BUDGET, Q_MIN, RECOVERY_PASSES, SWAP_FACTOR

QMR_MAX_PASSES = 40
LAYERING_GROWTH = 2.0
LAYERING_MAX_LAYERS = 16
ATOM_REGIONS = (Region.ATOMISTIC, Region.BLEND)


class DomainShape(str, Enum):
    BOX = "box"
    SPHERE = "sphere"


@dataclass
class DomainSpec:
    """
    Computational domain. ``extent`` holds the three side lengths of a box or
    the single radius of a sphere.
    """

    shape: DomainShape = DomainShape.BOX
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    extent: tuple[float, ...] = (1.0, 1.0, 1.0)
    boundary_spacing: float = 1.0
    grading: float = GRADING

    def __post_init__(self) -> None:
        self.shape = DomainShape(self.shape)
        self.center = tuple(float(c) for c in self.center)  # type: ignore[assignment]
        ext = tuple(float(e) for e in np.atleast_1d(self.extent))
        if self.shape == DomainShape.BOX and len(ext) == 1:
            ext = ext * 3
        expected = 3 if self.shape == DomainShape.BOX else 1
        if len(ext) != expected or min(ext) <= 0:
            raise MeshError(ErrorCode.BAD_PRECONDITION, f"{self.shape.value} extent must be {expected} positive lengths")
        self.extent = ext
        if not self.boundary_spacing > 0:
            raise MeshError(ErrorCode.BAD_PRECONDITION, f"boundary spacing must be positive, got {self.boundary_spacing}")
        if not self.grading >= 1:
            raise MeshError(ErrorCode.BAD_PRECONDITION, f"grading must be >= 1, got {self.grading}")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        half = 0.5 * np.asarray(self.extent) if self.shape == DomainShape.BOX else np.full(3, self.extent[0])
        return c - half, c + half

    @property
    def volume(self) -> float:
        if self.shape == DomainShape.BOX:
            return float(np.prod(self.extent))
        return float(4.0 / 3.0 * np.pi * self.extent[0] ** 3)

    def contains(self, points: np.ndarray, closed: bool = True) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.shape == DomainShape.BOX:
            lo, hi = self.bounds()
            if closed:
                return np.all((points >= lo) & (points <= hi), axis=1)
            return np.all((points > lo) & (points < hi), axis=1)
        r = np.linalg.norm(points - np.asarray(self.center), axis=1)
        return r <= self.extent[0] if closed else r < self.extent[0]

    def depth(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the domain boundary, negative outside."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.shape == DomainShape.BOX:
            lo, hi = self.bounds()
            return np.minimum(points - lo, hi - points).min(axis=1)
        return self.extent[0] - np.linalg.norm(points - np.asarray(self.center), axis=1)


@dataclass
class ContinuumMesh:
    """
    Continuum tets over a node array that starts with the atomistic nodes.

    ``outer_map[k]`` is the node index of outer-surface node ``k``; the
    triangulation handle is kept while the tets are still Delaunay so that
    refinement can insert into it.
    """

    nodes: np.ndarray
    tets: np.ndarray
    node_flags: np.ndarray
    n_inner: int
    interface: SurfaceMesh
    outer_map: np.ndarray
    protected: set[tuple[int, ...]] = field(default_factory=set)
    triangulation: DelaunayTriangulation | None = None
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    convex_outer: bool = True

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def as_mesh(self) -> TetMesh:
        return TetMesh(self.nodes, self.tets, None, self.node_flags)


# ==============================================================================
# DOMAIN BOUNDARY
# ==============================================================================


def _box_surface(spec: DomainSpec) -> SurfaceMesh:
    lo, hi = spec.bounds()
    size = hi - lo
    n = [max(1, int(np.ceil(s / spec.boundary_spacing - 1e-9))) for s in size]
    index: dict[tuple[int, int, int], int] = {}
    nodes: list[np.ndarray] = []

    def node(i: int, j: int, k: int) -> int:
        key = (i, j, k)
        if key not in index:
            index[key] = len(nodes)
            nodes.append(lo + size * np.array([i / n[0], j / n[1], k / n[2]]))
        return index[key]

    triangles: list[tuple[int, int, int]] = []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        for side in (0, n[axis]):
            outward = np.zeros(3)
            outward[axis] = 1.0 if side else -1.0
            for u in range(n[u_axis]):
                for v in range(n[v_axis]):
                    corners = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        ijk = [0, 0, 0]
                        ijk[axis] = side
                        ijk[u_axis] = u + du
                        ijk[v_axis] = v + dv
                        corners.append(node(*ijk))
                    for tri in ((corners[0], corners[1], corners[2]), (corners[0], corners[2], corners[3])):
                        a, b, c = (nodes[k] for k in tri)
                        if np.dot(np.cross(b - a, c - a), outward) < 0:
                            tri = (tri[0], tri[2], tri[1])
                        triangles.append(tri)
    return SurfaceMesh(np.asarray(nodes), np.asarray(triangles, dtype=np.int64))


def _icosphere(spec: DomainSpec) -> SurfaceMesh:
    phi = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]  # fmt: skip
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]  # fmt: skip
    radius = spec.extent[0]
    points = [np.asarray(v, dtype=float) / np.linalg.norm(v) for v in verts]
    edge = radius * np.linalg.norm(points[0] - points[1])
    while edge > spec.boundary_spacing:
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = points[a] + points[b]
                points.append(m / np.linalg.norm(m))
                midpoint[key] = len(points) - 1
            return midpoint[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            refined.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = refined
        edge *= 0.5
    nodes = np.asarray(spec.center) + radius * np.asarray(points)
    return SurfaceMesh(nodes, np.asarray(faces, dtype=np.int64))


def init_boundary(spec: DomainSpec) -> SurfaceMesh:
    """Closed, outward-wound triangulation of the domain boundary at the requested spacing."""
    surface = _box_surface(spec) if spec.shape == DomainShape.BOX else _icosphere(spec)
    logging.debug(f"init_boundary: {len(surface.nodes)} nodes, {surface.n_triangles} triangles")
    return surface


# ==============================================================================
# SHELL MESH
# ==============================================================================


def _carve(
    tets: np.ndarray,
    nodes: np.ndarray,
    walls: set[tuple[int, int, int]],
    keep_component,  # type: ignore[no-untyped-def]
) -> np.ndarray:
    """
    Split the tets into components separated by ``walls`` faces and keep the
    components whose representative tet ``keep_component`` accepts.
    """
    faces: dict[tuple[int, int, int], list[int]] = {}
    for t, tet in enumerate(tets.tolist()):
        for f in TET_FACES:
            faces.setdefault(face_key(tet[f[0]], tet[f[1]], tet[f[2]]), []).append(t)
    component = np.full(len(tets), -1, dtype=np.int64)
    keep = np.zeros(len(tets), dtype=bool)
    label = 0
    for seed in range(len(tets)):
        if component[seed] >= 0:
            continue
        component[seed] = label
        members = [seed]
        queue = deque([seed])
        while queue:
            t = queue.popleft()
            tet = tets[t]
            for f in TET_FACES:
                key = face_key(tet[f[0]], tet[f[1]], tet[f[2]])
                if key in walls:
                    continue
                for o in faces[key]:
                    if component[o] < 0:
                        component[o] = label
                        members.append(o)
                        queue.append(o)
        if keep_component(seed):
            keep[members] = True
        label += 1
    return keep


def _merge_nodes(
    inner_nodes: np.ndarray, extra: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Append ``extra`` points to ``inner_nodes``, reusing coincident ones; returns (nodes, index of each extra)."""
    if len(extra) == 0:
        return inner_nodes, np.zeros(0, dtype=np.int64)
    index = np.empty(len(extra), dtype=np.int64)
    out = [inner_nodes]
    n = len(inner_nodes)
    tree = cKDTree(inner_nodes) if len(inner_nodes) else None
    fresh: list[np.ndarray] = []
    fresh_tree_points: dict[tuple[float, float, float], int] = {}
    for k, p in enumerate(extra):
        if tree is not None:
            d, i = tree.query(p)
            if d <= eps:
                index[k] = int(i)
                continue
        key = (float(p[0]), float(p[1]), float(p[2]))
        if key in fresh_tree_points:
            index[k] = fresh_tree_points[key]
            continue
        fresh_tree_points[key] = n + len(fresh)
        index[k] = n + len(fresh)
        fresh.append(p)
    if fresh:
        out.append(np.asarray(fresh))
    return np.vstack(out), index


def mesh_between(
    outer: SurfaceMesh,
    inner: TetMesh | None = None,
    interior_nodes: np.ndarray | None = None,
    seed: int = 0,
    recovery_passes: int = RECOVERY_PASSES,
    convex_outer: bool = True,
) -> ContinuumMesh:
    """
    Tetrahedralize the shell between ``outer`` and the atomistic mesh ``inner``.

    The inner node array is kept as the prefix of the result's node array, so
    the continuum tets can be fused with ``inner`` without renumbering.
    Interior nodes that would destroy an inner tet are dropped. When an outer
    node conflicts, or the inner tets are still missing after
    ``recovery_passes`` passes, a convex outer surface falls back to
    ``mesh_by_layering`` and every interior node is dropped.
    """
    if inner is None:
        inner = TetMesh(np.zeros((0, 3)), np.zeros((0, 4), dtype=np.int64))
    assert inner.node_flags is not None
    interface = extract_boundary(inner) if inner.n_tets else SurfaceMesh(inner.nodes, np.zeros((0, 3)))
    outer_used = outer.node_ids()
    if inner.n_tets:
        used = np.unique(inner.tets)
        inside = points_inside_surface(inner.nodes[used], outer)
        if not np.all(inside) and outer.n_triangles:
            eps_on = node_tolerance(np.vstack([inner.nodes, outer.nodes]))
            d, _ = cKDTree(outer.nodes[outer_used]).query(inner.nodes[used])
            inside |= d <= eps_on
        if not np.all(inside):
            raise MeshError(
                ErrorCode.BAD_PRECONDITION,
                f"{int((~inside).sum())} atomistic nodes are not enclosed by the outer surface",
            )

    eps = node_tolerance(np.vstack([inner.nodes, outer.nodes]))
    nodes, outer_index = _merge_nodes(inner.nodes, outer.nodes[outer_used], eps)
    outer_map = np.full(len(outer.nodes), -1, dtype=np.int64)
    outer_map[outer_used] = outer_index
    n_fixed = len(nodes)

    interior = np.zeros((0, 3)) if interior_nodes is None else np.asarray(interior_nodes, dtype=float).reshape(-1, 3)
    dropped: list[int] = []
    if len(interior):
        ok = points_inside_surface(interior, outer)
        if interface.n_triangles:
            ok &= ~points_inside_surface(interior, interface)
        d, _ = cKDTree(nodes).query(interior)
        ok &= d > eps
        dropped.extend(np.flatnonzero(~ok).tolist())
        interior_keep = np.flatnonzero(ok)
    else:
        interior_keep = np.zeros(0, dtype=np.int64)

    protected = inner.sorted_tet_set()
    for attempt in range(recovery_passes + 1):
        points = np.vstack([nodes, interior[interior_keep]])
        dt = build_triangulation(points, seed)
        finite = dt.finite_tets()
        present = {tuple(sorted(t)) for t in finite.tolist()}
        missing = [t for t in protected if t not in present]
        if not missing:
            break
        conflicting = _conflicting_nodes(dt.kernel, missing, inner.n_nodes, len(points))
        outer_conflicts = [v for v in conflicting if v < n_fixed]
        if outer_conflicts or attempt == recovery_passes:
            if not convex_outer:
                raise MeshError(
                    ErrorCode.BOUNDARY_NOT_RECOVERED,
                    f"{len(missing)} atomistic tets missing from the shell triangulation",
                    {"missing": missing[:20], "outer_conflicts": outer_conflicts[:20]},
                )
            logging.warning(f"⚠️ {len(missing)} atomistic tets not recovered, falling back to radial layering")
            cm = mesh_by_layering(outer, inner)
            cm.dropped = np.arange(len(interior), dtype=np.int64)
            return cm
        drop_local = {v - n_fixed for v in conflicting}
        dropped.extend(int(interior_keep[k]) for k in sorted(drop_local))
        interior_keep = np.asarray([k for i, k in enumerate(interior_keep) if i not in drop_local], dtype=np.int64)
        logging.info(f"🔧 Boundary recovery pass {attempt + 1}: dropped {len(drop_local)} interior nodes")

    outer_faces = {face_key(*outer_map[tri]) for tri in outer.triangles}
    walls = outer_faces | interface.face_keys()
    candidates = np.asarray([t for t in finite.tolist() if tuple(sorted(t)) not in protected], dtype=np.int64)
    candidates = candidates.reshape(-1, 4)
    centroids = points[candidates].mean(axis=1) if len(candidates) else np.zeros((0, 3))
    outer_shifted = SurfaceMesh(points, outer_map[outer.triangles])

    def keep_component(t: int) -> bool:
        c = centroids[t][None]
        if interface.n_triangles and points_inside_surface(c, SurfaceMesh(points, interface.triangles))[0]:
            return False
        return convex_outer or bool(points_inside_surface(c, outer_shifted)[0])

    keep = _carve(candidates, points, walls, keep_component)
    tets = canonical_tet_order(candidates[keep])

    flags = np.full(len(points), NodeFlag.FEM_NODE, dtype=np.int8)
    flags[: inner.n_nodes] = inner.node_flags
    boundary_nodes = outer_map[outer_used]
    flags[boundary_nodes[boundary_nodes >= inner.n_nodes]] = NodeFlag.DOMAIN_BOUNDARY

    cm = ContinuumMesh(
        points,
        tets,
        flags,
        inner.n_nodes,
        SurfaceMesh(points, interface.triangles),
        outer_map,
        protected,
        dt,
        np.asarray(sorted(dropped), dtype=np.int64),
        convex_outer,
    )
    check_conformity(cm, None if convex_outer else outer_faces)
    logging.info(f"🧱 Shell mesh: {len(tets)} continuum tets on {len(points)} nodes ({len(dropped)} nodes dropped)")
    return cm


def _conflicting_nodes(kernel: PredicateKernel, tets: list[tuple[int, ...]], n_inner: int, n_points: int) -> list[int]:
    """Non-inner nodes strictly inside the circumsphere of any of ``tets``."""
    coords = np.asarray(kernel.coords)
    later = np.arange(n_inner, n_points)
    if len(later) == 0:
        return []
    tree = cKDTree(coords[later])
    out: set[int] = set()
    for tet in tets:
        verts = list(tet)
        if kernel.orient(*verts) < 0:
            verts[0], verts[1] = verts[1], verts[0]
        p = coords[verts]
        a = p[1:] - p[0]
        center = p[0] + np.linalg.solve(a, 0.5 * np.einsum("ij,ij->i", a, a))
        radius = float(np.linalg.norm(center - p[0]))
        for k in tree.query_ball_point(center, radius * (1 + 1e-9) + 1e-12):
            v = int(later[k])
            if kernel.insphere(*verts, v) > 0:
                out.add(v)
    return sorted(out)


def check_conformity(cm: ContinuumMesh, outer_faces: set[tuple[int, int, int]] | None = None) -> None:
    """Every interface triangle (and every given outer face) must be a face of exactly one continuum tet."""
    counts: dict[tuple[int, int, int], int] = {}
    for tet in cm.tets.tolist():
        for f in TET_FACES:
            key = face_key(tet[f[0]], tet[f[1]], tet[f[2]])
            counts[key] = counts.get(key, 0) + 1
    required = cm.interface.face_keys() | (outer_faces or set())
    missing = [k for k in required if counts.get(k, 0) != 1]
    if missing:
        raise MeshError(
            ErrorCode.BOUNDARY_NOT_RECOVERED,
            f"{len(missing)} interface faces are not matched by exactly one continuum tet",
            {"faces": missing[:20]},
        )


# ==============================================================================
# RADIAL LAYERING
# ==============================================================================


class _Surface:
    """Outward-wound closed triangle surface with a directed-edge lookup."""

    def __init__(self, triangles: Iterable[Sequence[int]]) -> None:
        self.faces: dict[int, tuple[int, int, int]] = {}
        self.edges: dict[tuple[int, int], int] = {}
        self._next = 0
        for tri in triangles:
            self.add((int(tri[0]), int(tri[1]), int(tri[2])))

    def add(self, tri: tuple[int, int, int]) -> int:
        fid = self._next
        self._next += 1
        self.faces[fid] = tri
        for e in _directed_edges(tri):
            self.edges[e] = fid
        return fid

    def remove(self, fid: int) -> None:
        for e in _directed_edges(self.faces.pop(fid)):
            if self.edges.get(e) == fid:
                del self.edges[e]

    def opposite(self, u: int, v: int) -> int:
        """Third vertex of the face holding the directed edge u -> v."""
        tri = self.faces[self.edges[(u, v)]]
        return next(w for w in tri if w != u and w != v)


def _directed_edges(tri: tuple[int, int, int]) -> tuple[tuple[int, int], ...]:
    a, b, c = tri
    return (a, b), (b, c), (c, a)


def _beyond(points: np.ndarray, triangles: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Exact sign of orient3d(triangle, p) for every triangle; floats first, ties resolved exactly."""
    tri = points[triangles]
    det = np.einsum("ij,ij->i", tri[:, 1] - tri[:, 0], np.cross(tri[:, 2] - tri[:, 0], p - tri[:, 0]))
    scale = np.max(np.abs(tri - p), axis=(1, 2)) ** 3
    sign = np.sign(det).astype(np.int64)
    for k in np.flatnonzero(np.abs(det) <= 1e-10 * scale):
        sign[k] = orient3d(*(tuple(points[v]) for v in triangles[k]), tuple(p))
    return sign


def _kernel_centre(points: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, float]:
    """
    Centre of the largest ball inside every inner half-space of the surface
    triangles, with its radius. A positive radius means the surface is
    star-shaped about the centre.
    """
    tri = points[triangles]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals /= np.maximum(np.linalg.norm(normals, axis=1), 1e-300)[:, None]
    span = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    result = linprog(
        c=[0.0, 0.0, 0.0, -1.0],
        A_ub=np.hstack([normals, np.ones((len(normals), 1))]),
        b_ub=np.einsum("ij,ij->i", normals, tri[:, 0]),
        bounds=[(None, None)] * 3 + [(0.0, span)],
        method="highs",
    )
    if not result.success:
        return points.mean(axis=0), 0.0
    return np.asarray(result.x[:3]), float(result.x[3])


def _prism_tets(
    tri: tuple[int, int, int], bottom: dict[int, int], top: dict[int, int]
) -> list[tuple[int, int, int, int]]:
    """
    Three tets of the prism between an outward triangle and its lifted copy.
    Quad faces are split from the lower-indexed bottom node to the
    higher-indexed top node, so neighbouring prisms agree.
    """
    p, q, s = sorted(tri)
    i = tri.index(p)
    tets = [
        (bottom[p], bottom[q], bottom[s], top[s]),
        (bottom[q], bottom[p], top[q], top[s]),
        (bottom[p], top[p], top[q], top[s]),
    ]
    if tri[(i + 1) % 3] != q:
        tets = [(b, a, c, d) for a, b, c, d in tets]
    return tets


def mesh_by_layering(
    outer: SurfaceMesh,
    inner: TetMesh,
    layer_growth: float = LAYERING_GROWTH,
    max_layers: int = LAYERING_MAX_LAYERS,
) -> ContinuumMesh:
    """
    Conforming shell mesh built outward from the atomistic surface.

    The surface is lifted along rays from a centre it is star-shaped about,
    in geometrically growing layers, onto a sphere strictly between the
    surface and ``outer``. Edge flips make the sphere layer convex and the
    outer nodes are then wrapped on one at a time, nearest first, each coning
    to the faces it sees. Every interface triangle is the base of exactly one
    prism tet. ``outer`` must be convex and outward-wound.
    """
    assert inner.node_flags is not None
    interface = extract_boundary(inner)
    if interface.n_triangles == 0:
        raise MeshError(ErrorCode.BAD_PRECONDITION, "radial layering needs a non-empty atomistic surface")
    centre, inradius = _kernel_centre(inner.nodes, interface.triangles)
    point = tuple(float(x) for x in centre)
    facing = _beyond(inner.nodes, interface.triangles, centre)
    if inradius <= 0 or np.any(facing >= 0):
        raise MeshError(
            ErrorCode.BOUNDARY_NOT_RECOVERED,
            "atomistic surface is not star-shaped about any point; radial layering is impossible",
            {"faces_facing_centre": int(np.count_nonzero(facing >= 0))},
        )

    surface_ids = np.unique(interface.triangles)
    offsets = inner.nodes[surface_ids] - centre
    r_in = float(np.linalg.norm(offsets, axis=1).max())
    outer_tri = outer.nodes[outer.triangles]
    outer_normals = np.cross(outer_tri[:, 1] - outer_tri[:, 0], outer_tri[:, 2] - outer_tri[:, 0])
    outer_normals /= np.maximum(np.linalg.norm(outer_normals, axis=1), 1e-300)[:, None]
    r_out = float(np.min(np.einsum("ij,ij->i", outer_normals, outer_tri[:, 0] - centre)))
    if not r_in < r_out:
        raise MeshError(
            ErrorCode.BOUNDARY_NOT_RECOVERED,
            f"atomistic surface reaches within {r_out:.3g} of the domain boundary (needs {r_in:.3g})",
        )
    radius = 0.5 * (r_in + r_out)

    eps = node_tolerance(np.vstack([inner.nodes, outer.nodes]))
    outer_used = outer.node_ids()
    nodes, outer_index = _merge_nodes(inner.nodes, outer.nodes[outer_used], eps)
    outer_map = np.full(len(outer.nodes), -1, dtype=np.int64)
    outer_map[outer_used] = outer_index

    sigma = radius / np.linalg.norm(offsets, axis=1)
    n_layers = int(np.clip(np.ceil(np.log(sigma.max()) / np.log(layer_growth)), 1, max_layers))
    layers = [dict(zip(surface_ids.tolist(), surface_ids.tolist()))]
    new_points = []
    n_points = len(nodes)
    for k in range(1, n_layers + 1):
        new_points.append(centre + offsets * (sigma ** (k / n_layers))[:, None])
        layers.append(dict(zip(surface_ids.tolist(), range(n_points, n_points + len(surface_ids)))))
        n_points += len(surface_ids)
    points = np.vstack([nodes, *new_points])

    tets: list[tuple[int, int, int, int]] = []
    for k in range(n_layers):
        for tri in interface.triangles.tolist():
            tets.extend(_prism_tets(tuple(tri), layers[k], layers[k + 1]))
    layer_tets = np.asarray(tets, dtype=np.int64)
    inverted = np.flatnonzero(tet_volumes(points[layer_tets]) <= 0)
    inverted = [t for t in inverted if orient3d(*(tuple(points[v]) for v in layer_tets[t])) <= 0]
    if inverted:
        raise MeshError(ErrorCode.BOUNDARY_NOT_RECOVERED, f"{len(inverted)} radial layer tets are inverted")

    top = layers[-1]
    hull = _Surface((top[a], top[b], top[c]) for a, b, c in interface.triangles.tolist())
    tets.extend(_convexify(hull, points, point))

    outer_nodes = np.unique(outer_index)
    order = outer_nodes[np.lexsort((outer_nodes, np.linalg.norm(points[outer_nodes] - centre, axis=1)))]
    for p in order.tolist():
        faces = list(hull.faces.items())
        sign = _beyond(points, np.asarray([tri for _, tri in faces], dtype=np.int64), points[p])
        visible = {fid for (fid, _), s in zip(faces, sign) if s > 0}
        if not visible:
            raise MeshError(ErrorCode.BOUNDARY_NOT_RECOVERED, f"outer node {p} does not see the layered shell")
        horizon = []
        for fid in visible:
            tri = hull.faces[fid]
            tets.append((*tri, p))
            horizon.extend((a, b) for a, b in _directed_edges(tri) if hull.edges.get((b, a)) not in visible)
        for fid in visible:
            hull.remove(fid)
        for a, b in horizon:
            hull.add((a, b, p))

    flags = np.full(len(points), NodeFlag.FEM_NODE, dtype=np.int8)
    flags[: inner.n_nodes] = inner.node_flags
    flags[outer_nodes[outer_nodes >= inner.n_nodes]] = NodeFlag.DOMAIN_BOUNDARY
    cm = ContinuumMesh(
        points,
        canonical_tet_order(np.asarray(tets, dtype=np.int64)),
        flags,
        inner.n_nodes,
        SurfaceMesh(points, interface.triangles),
        outer_map,
        inner.sorted_tet_set(),
    )
    check_conformity(cm)
    logging.info(f"🧅 Radial layering: {n_layers} layers, {len(tets)} continuum tets on {len(points)} nodes")
    return cm


def _convexify(
    surface: _Surface, points: np.ndarray, centre: tuple[float, float, float]
) -> list[tuple[int, int, int, int]]:
    """
    Flip reflex edges of a star-shaped surface with nodes in convex position,
    gluing one tet onto the outside per flip, until it bounds a convex body.
    """
    pts = [tuple(float(x) for x in p) for p in points]
    tets: list[tuple[int, int, int, int]] = []
    pending = deque(sorted({edge_key(u, v) for u, v in surface.edges}))
    budget = 50 * len(surface.faces) + 100

    def reflex(u: int, v: int) -> bool:
        return orient3d(pts[u], pts[v], pts[surface.opposite(u, v)], pts[surface.opposite(v, u)]) > 0

    while pending:
        u, v = pending.popleft()
        if (u, v) not in surface.edges or not reflex(u, v):
            continue
        x, y = surface.opposite(u, v), surface.opposite(v, u)
        if (x, y) in surface.edges or (y, x) in surface.edges:
            continue
        if orient3d(pts[v], pts[x], pts[y], centre) >= 0 or orient3d(pts[u], pts[y], pts[x], centre) >= 0:
            continue
        surface.remove(surface.edges[(u, v)])
        surface.remove(surface.edges[(v, u)])
        surface.add((v, x, y))
        surface.add((u, y, x))
        tets.append((u, v, x, y))
        pending.extend([edge_key(u, x), edge_key(x, v), edge_key(v, y), edge_key(y, u)])
        budget -= 1
        if budget < 0:
            raise MeshError(ErrorCode.BOUNDARY_NOT_RECOVERED, "edge flips on the layered shell did not terminate")
    left = [e for e in surface.edges if e[0] < e[1] and reflex(*e)]
    if left:
        raise MeshError(ErrorCode.BOUNDARY_NOT_RECOVERED, f"{len(left)} reflex edges remain on the layered shell")
    return tets


# ==============================================================================
# QUALITY REFINEMENT
# ==============================================================================


def _bad_tets(cm: ContinuumMesh, tets: np.ndarray, q_min: float, grading: float) -> list[int]:
    pts = cm.nodes[tets]
    q = element_qualities(pts)
    touches_atoms = np.any(cm.node_flags[tets] == NodeFlag.ATOM, axis=1)
    bad = set(np.flatnonzero((q < q_min) & ~touches_atoms).tolist())
    if np.isfinite(grading):
        size = longest_edges(pts)
        faces: dict[tuple[int, int, int], list[int]] = {}
        for t, tet in enumerate(tets.tolist()):
            for f in TET_FACES:
                faces.setdefault(face_key(tet[f[0]], tet[f[1]], tet[f[2]]), []).append(t)
        for owners in faces.values():
            if len(owners) != 2:
                continue
            s, t = owners
            big, small = (s, t) if size[s] >= size[t] else (t, s)
            if size[big] > grading * size[small] and not touches_atoms[big]:
                bad.add(big)
    # worst quality first, then index
    return sorted(bad, key=lambda t: (q[t], t))


def qmr_refine(
    cm: ContinuumMesh,
    q_min: float = Q_MIN,
    grading: float = GRADING,
    node_budget: int = NODE_BUDGET,
    domain: DomainSpec | None = None,
    swap_factor: float = SWAP_FACTOR,
) -> ContinuumMesh:
    """
    Insert circumcentres of poor or badly graded continuum tets, then clean up
    the remaining poor tets with edge swaps.

    Tets touching ATOM nodes are protected. Circumcentres outside the domain
    and insertions whose cavity would reach an atomistic tet or the hull are
    rejected, so interface and domain-boundary faces are never split. A mesh
    without its Delaunay handle (one built by radial layering) only gets the
    swap clean-up.
    """
    if q_min <= 0 and not np.isfinite(grading):
        return cm
    if not cm.convex_outer:
        raise MeshError(ErrorCode.BAD_PRECONDITION, "qmr_refine needs a shell mesh with a convex outer surface")
    dt = cm.triangulation
    flags = cm.node_flags.tolist()
    stuck: set[tuple[int, ...]] = set()
    inserted = 0
    tets = cm.tets
    for _ in range(QMR_MAX_PASSES if dt is not None else 0):
        assert dt is not None
        bad = [t for t in _bad_tets(cm, tets, q_min, grading) if tuple(sorted(tets[t])) not in stuck]
        if not bad:
            break
        progress = 0
        consumed: set[int] = set()
        for t in bad:
            verts = [int(v) for v in tets[t]]
            if any(v in consumed for v in verts):
                continue
            key = tuple(sorted(verts))
            p = cm.nodes[verts]
            a = p[1:] - p[0]
            try:
                center = p[0] + np.linalg.solve(a, 0.5 * np.einsum("ij,ij->i", a, a))
            except np.linalg.LinAlgError:
                stuck.add(key)
                continue
            if domain is not None and not domain.contains(center[None], closed=False)[0]:
                stuck.add(key)
                continue
            if len(flags) + 1 > node_budget:
                raise MeshError(ErrorCode.BUDGET_EXCEEDED, f"continuum refinement exceeded {node_budget} nodes")
            v = dt.kernel.add_point(center)
            try:
                created = dt.insert(v, protected=cm.protected, allow_hull_growth=False)
            except DelaunayError:
                created = None
            if created is None:
                dt.kernel.pop_point()
                stuck.add(key)
                continue
            flags.append(int(NodeFlag.FEM_NODE))
            consumed.update(verts)
            progress += 1
        inserted += progress
        cm.nodes = dt.nodes()
        cm.node_flags = np.asarray(flags, dtype=np.int8)
        finite = dt.finite_tets()
        tets = np.asarray([t for t in finite.tolist() if tuple(sorted(t)) not in cm.protected], dtype=np.int64)
        tets = tets.reshape(-1, 4)
        if not progress:
            break
    cm.tets = canonical_tet_order(tets)

    poor = _bad_tets(cm, cm.tets, q_min, np.inf)
    swaps = 0
    if poor:
        editor = MeshEditor(cm.as_mesh())
        swaps = editor.swap_sweeps(poor, swap_factor)
        if swaps:
            cm.tets = canonical_tet_order(editor.to_mesh().tets)
            cm.triangulation = None
    left = len(_bad_tets(cm, cm.tets, q_min, np.inf))
    logging.info(f"✨ Quality refinement: {inserted} nodes inserted, {swaps} swaps")
    if left:
        logging.warning(f"⚠️ {left} unprotected continuum tets remain below q_min={q_min}")
    return cm


# ==============================================================================
# FULL CONTINUUM CONSTRUCTION
# ==============================================================================


def fuse(atomistic: TetMesh, cm: ContinuumMesh) -> TetMesh:
    """Coupled mesh: atomistic tets with their tags followed by CONTINUUM tets."""
    assert atomistic.region is not None and atomistic.site_ids is not None
    site_ids = np.full(cm.n_nodes, -1, dtype=np.int64)
    site_ids[: cm.n_inner] = atomistic.site_ids
    region = np.concatenate([atomistic.region, np.full(len(cm.tets), Region.CONTINUUM, dtype=np.int8)])
    return TetMesh(cm.nodes, np.vstack([atomistic.tets, cm.tets]), region, cm.node_flags, site_ids)


def build_continuum(
    atomistic: TetMesh,
    domain: DomainSpec,
    interior_nodes: np.ndarray | None = None,
    q_min: float = Q_MIN,
    node_budget: int = NODE_BUDGET,
    swap_factor: float = SWAP_FACTOR,
    seed: int = 0,
) -> TetMesh:
    """Boundary seeding, shell mesh, quality refinement and fusion in one call."""
    outer = init_boundary(domain)
    if interior_nodes is not None and len(interior_nodes):
        interior_nodes = np.asarray(interior_nodes, dtype=float).reshape(-1, 3)
        interior_nodes = interior_nodes[domain.contains(interior_nodes, closed=False)]
    cm = mesh_between(outer, atomistic, interior_nodes, seed)
    cm = qmr_refine(cm, q_min, domain.grading, node_budget, domain, swap_factor)
    return fuse(atomistic, cm)


def atom_tets(mesh: TetMesh) -> np.ndarray:
    assert mesh.region is not None
    return np.isin(mesh.region, [int(r) for r in ATOM_REGIONS])
