"""
Tetrahedral mesh representation, quality metrics, topology and validation.

``TetMesh`` is the single mesh type used for the atomistic mesh, the
continuum mesh and the fused coupled mesh. Tets are stored positively
oriented; face ``i`` of a tet is the face opposite its vertex ``i`` and is
listed in ``TET_FACES`` with an outward-pointing winding.
"""

import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

from acmesh_architect.core.errors import ErrorCode, MeshError
from acmesh_architect.geometry.predicates import orient3d
from acmesh_architect.resources.constants import NODE_EPS_REL, QUALITY_BINS

# Outward winding of the face opposite vertex i of a positively oriented tet
TET_FACES: tuple[tuple[int, int, int], ...] = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))
TET_EDGES: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

QUALITY_SCALE = 72.0 * np.sqrt(3.0)

VIOLATION_CODES: dict[str, ErrorCode] = {
    "BAD_INDEX": ErrorCode.BAD_PRECONDITION,
    "ORIENTATION": ErrorCode.DEGENERATE_TET,
    "REPEATED_VERTEX": ErrorCode.DEGENERATE_TET,
    "NON_MANIFOLD": ErrorCode.NON_MANIFOLD,
    "DUPLICATE_NODE": ErrorCode.DUPLICATE_POINT,
    "REGION_TAG": ErrorCode.BAD_PRECONDITION,
    "ATOM_FLAG": ErrorCode.BAD_PRECONDITION,
}

FaceKey = tuple[int, int, int]
EdgeKey = tuple[int, int]


class Region(IntEnum):
    ATOMISTIC = 0
    BLEND = 1
    CONTINUUM = 2


class NodeFlag(IntEnum):
    ATOM = 0
    FEM_NODE = 1
    DOMAIN_BOUNDARY = 2


def face_key(a: int, b: int, c: int) -> FaceKey:
    return tuple(sorted((int(a), int(b), int(c))))  # type: ignore[return-value]


def edge_key(a: int, b: int) -> EdgeKey:
    return (int(a), int(b)) if a < b else (int(b), int(a))


# ==============================================================================
# DATA TYPES
# ==============================================================================


@dataclass
class TetMesh:
    nodes: np.ndarray
    tets: np.ndarray
    region: np.ndarray | None = None
    node_flags: np.ndarray | None = None
    site_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 3)
        self.tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4)
        if self.region is None:
            self.region = np.full(len(self.tets), Region.CONTINUUM, dtype=np.int8)
        self.region = np.asarray(self.region, dtype=np.int8)
        if self.node_flags is None:
            self.node_flags = np.full(len(self.nodes), NodeFlag.FEM_NODE, dtype=np.int8)
        self.node_flags = np.asarray(self.node_flags, dtype=np.int8)
        if self.site_ids is None:
            self.site_ids = np.full(len(self.nodes), -1, dtype=np.int64)
        self.site_ids = np.asarray(self.site_ids, dtype=np.int64)
        self._adjacency: FaceAdjacency | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def face_adjacency(self) -> "FaceAdjacency":
        if self._adjacency is None:
            self._adjacency = build_adjacency(self)
        return self._adjacency

    def tet_points(self) -> np.ndarray:
        """(m, 4, 3) array of vertex coordinates."""
        return self.nodes[self.tets]

    def centroids(self) -> np.ndarray:
        return self.tet_points().mean(axis=1)

    def copy(self) -> "TetMesh":
        assert self.region is not None and self.node_flags is not None and self.site_ids is not None
        return TetMesh(
            self.nodes.copy(), self.tets.copy(), self.region.copy(), self.node_flags.copy(), self.site_ids.copy()
        )

    def select(self, mask: np.ndarray) -> "TetMesh":
        """Sub-mesh of the selected tets, keeping the full node array."""
        assert self.region is not None
        return TetMesh(self.nodes, self.tets[mask], self.region[mask], self.node_flags, self.site_ids)

    def compact(self) -> "TetMesh":
        """Drop nodes that no tet references and renumber."""
        assert self.node_flags is not None and self.site_ids is not None
        used = np.unique(self.tets)
        remap = np.full(self.n_nodes, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TetMesh(self.nodes[used], remap[self.tets], self.region, self.node_flags[used], self.site_ids[used])

    def sorted_tet_set(self) -> set[tuple[int, ...]]:
        return {tuple(sorted(int(v) for v in t)) for t in self.tets}


@dataclass
class FaceAdjacency:
    """Sorted face key -> incident tets (1 for boundary faces, 2 for interior)."""

    faces: dict[FaceKey, list[int]]

    def boundary_faces(self) -> list[FaceKey]:
        return [k for k, v in self.faces.items() if len(v) == 1]

    def interior_faces(self) -> list[FaceKey]:
        return [k for k, v in self.faces.items() if len(v) == 2]

    def neighbors(self, mesh: TetMesh, t: int) -> list[int]:
        """Tet index across each face of tet t, -1 on the boundary."""
        out = []
        tet = mesh.tets[t]
        for f in TET_FACES:
            owners = self.faces[face_key(tet[f[0]], tet[f[1]], tet[f[2]])]
            other = [o for o in owners if o != t]
            out.append(other[0] if other else -1)
        return out


@dataclass
class SurfaceMesh:
    """Triangulated surface referencing a node array; ``owners`` are the inside tets."""

    nodes: np.ndarray
    triangles: np.ndarray
    owners: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.owners) != len(self.triangles):
            self.owners = np.full(len(self.triangles), -1, dtype=np.int64)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def face_keys(self) -> set[FaceKey]:
        return {face_key(*t) for t in self.triangles}

    def node_ids(self) -> np.ndarray:
        return np.unique(self.triangles)

    def is_closed(self) -> bool:
        counts: dict[EdgeKey, int] = defaultdict(int)
        for a, b, c in self.triangles:
            for e in ((a, b), (b, c), (c, a)):
                counts[edge_key(*e)] += 1
        return all(v == 2 for v in counts.values())

    def euler_characteristic(self) -> int:
        edges = set()
        for a, b, c in self.triangles:
            edges.update((edge_key(a, b), edge_key(b, c), edge_key(c, a)))
        return len(self.node_ids()) - len(edges) + self.n_triangles

    def enclosed_volume(self) -> float:
        """Signed volume by the divergence theorem (positive for outward winding)."""
        p = self.nodes[self.triangles]
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


@dataclass
class QualityReport:
    per_tet_q: np.ndarray
    histogram: np.ndarray
    min_q: float
    fraction_high: float

    def as_dict(self) -> dict:
        return {
            "histogram": [int(v) for v in self.histogram],
            "min_q": self.min_q,
            "fraction_high": self.fraction_high,
        }


@dataclass
class Violation:
    kind: str
    index: int
    message: str = ""


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def raise_if_invalid(self, what: str) -> None:
        """Raise a MeshError coded after the first violation found."""
        if self.ok:
            return
        first = self.violations[0]
        raise MeshError(
            VIOLATION_CODES.get(first.kind, ErrorCode.NON_MANIFOLD),
            f"{what} is invalid: {sorted(self.kinds())}",
            {"kinds": sorted(self.kinds()), "first": first.index},
        )


# ==============================================================================
# ELEMENT GEOMETRY
# ==============================================================================


def tet_volume(a: Sequence[float], b: Sequence[float], c: Sequence[float], d: Sequence[float]) -> float:
    """Signed volume, one sixth of det[b-a, c-a, d-a]."""
    a_ = np.asarray(a, dtype=float)
    return float(np.dot(np.asarray(b) - a_, np.cross(np.asarray(c) - a_, np.asarray(d) - a_)) / 6.0)


def tet_volumes(points: np.ndarray) -> np.ndarray:
    """Signed volumes of a (m, 4, 3) batch."""
    e1 = points[:, 1] - points[:, 0]
    e2 = points[:, 2] - points[:, 0]
    e3 = points[:, 3] - points[:, 0]
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


def element_qualities(points: np.ndarray) -> np.ndarray:
    """Quality 72*sqrt(3)*|K| / (sum of squared edge lengths)^(3/2) for a (m, 4, 3) batch."""
    points = np.asarray(points, dtype=float).reshape(-1, 4, 3)
    vol = np.abs(tet_volumes(points))
    s2 = np.zeros(len(points))
    for i, j in TET_EDGES:
        d = points[:, i] - points[:, j]
        s2 += np.einsum("ij,ij->i", d, d)
    q = np.zeros(len(points))
    ok = s2 > 0
    q[ok] = QUALITY_SCALE * vol[ok] / s2[ok] ** 1.5
    return np.clip(q, 0.0, 1.0)


def element_quality(tet: Sequence[Sequence[float]] | np.ndarray) -> float:
    return float(element_qualities(np.asarray(tet, dtype=float)[None])[0])


def set_quality(tets: Iterable[Sequence[Sequence[float]] | np.ndarray]) -> float:
    """Minimum element quality over a nonempty set of tets."""
    stacked = [np.asarray(t, dtype=float) for t in tets]
    if not stacked:
        raise MeshError(ErrorCode.EMPTY_SET, "set_quality of an empty tet set")
    return float(element_qualities(np.stack(stacked)).min())


def circumsphere(tet: Sequence[Sequence[float]] | np.ndarray) -> tuple[np.ndarray, float]:
    p = np.asarray(tet, dtype=float)
    if orient3d(p[0], p[1], p[2], p[3]) == 0:
        raise MeshError(ErrorCode.DEGENERATE_TET, "circumsphere of a flat tetrahedron")
    a = p[1:] - p[0]
    rhs = 0.5 * np.einsum("ij,ij->i", a, a)
    x = np.linalg.solve(a, rhs)
    return p[0] + x, float(np.linalg.norm(x))


def circumradii(points: np.ndarray) -> np.ndarray:
    """Circumradius of each tet in a (m, 4, 3) batch; inf for flat tets."""
    a = points[:, 1:] - points[:, :1]
    rhs = 0.5 * np.einsum("mij,mij->mi", a, a)
    det = np.linalg.det(a)
    scale = np.einsum("mij,mij->m", a, a) ** 1.5
    flat = np.abs(det) <= 1e-14 * np.maximum(scale, 1e-300)
    out = np.full(len(points), np.inf)
    if np.any(~flat):
        x = np.linalg.solve(a[~flat], rhs[~flat][..., None])[..., 0]
        out[~flat] = np.linalg.norm(x, axis=1)
    return out


def longest_edges(points: np.ndarray) -> np.ndarray:
    out = np.zeros(len(points))
    for i, j in TET_EDGES:
        out = np.maximum(out, np.linalg.norm(points[:, i] - points[:, j], axis=1))
    return out


def node_tolerance(nodes: np.ndarray) -> float:
    if len(nodes) == 0:
        return 0.0
    return float(NODE_EPS_REL * np.linalg.norm(nodes.max(axis=0) - nodes.min(axis=0)))


# ==============================================================================
# TOPOLOGY
# ==============================================================================


def build_adjacency(mesh: TetMesh) -> FaceAdjacency:
    faces: dict[FaceKey, list[int]] = defaultdict(list)
    for t, tet in enumerate(mesh.tets.tolist()):
        for f in TET_FACES:
            faces[face_key(tet[f[0]], tet[f[1]], tet[f[2]])].append(t)
    bad = {k: v for k, v in faces.items() if len(v) > 2}
    if bad:
        key, owners = next(iter(bad.items()))
        raise MeshError(
            ErrorCode.NON_MANIFOLD,
            f"{len(bad)} faces shared by 3 or more tets, e.g. {key} by {owners}",
            {"faces": list(bad)[:20]},
        )
    return FaceAdjacency(dict(faces))


def extract_boundary(mesh: TetMesh, region_filter: Iterable[Region] | None = None) -> SurfaceMesh:
    """Faces with exactly one incident tet inside the filter, wound away from the filtered region."""
    assert mesh.region is not None
    if region_filter is None:
        inside = np.ones(mesh.n_tets, dtype=bool)
    else:
        inside = np.isin(mesh.region, [int(r) for r in region_filter])
    adjacency = mesh.face_adjacency
    triangles = []
    owners = []
    for t in np.flatnonzero(inside):
        tet = mesh.tets[t]
        for f in TET_FACES:
            tri = (int(tet[f[0]]), int(tet[f[1]]), int(tet[f[2]]))
            incident = adjacency.faces[face_key(*tri)]
            if sum(1 for o in incident if inside[o]) == 1:
                triangles.append(tri)
                owners.append(int(t))
    return SurfaceMesh(mesh.nodes, np.asarray(triangles, dtype=np.int64).reshape(-1, 3), np.asarray(owners))


def tets_by_node(tets: np.ndarray, n_nodes: int) -> list[list[int]]:
    star: list[list[int]] = [[] for _ in range(n_nodes)]
    for t, tet in enumerate(tets.tolist()):
        for v in tet:
            star[v].append(t)
    return star


def node_neighbors(tets: np.ndarray, n_nodes: int) -> list[set[int]]:
    nbrs: list[set[int]] = [set() for _ in range(n_nodes)]
    for tet in tets.tolist():
        for i, j in TET_EDGES:
            nbrs[tet[i]].add(tet[j])
            nbrs[tet[j]].add(tet[i])
    return nbrs


def points_inside_surface(points: np.ndarray, surface: SurfaceMesh) -> np.ndarray:
    """
    Parity ray casting against a closed triangulated surface.

    Crossings are decided with exact orientation tests; a ray that grazes an
    edge or vertex is retried along another direction.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    result = np.zeros(len(points), dtype=bool)
    if surface.n_triangles == 0 or len(points) == 0:
        return result
    tri = surface.nodes[surface.triangles]
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    span = float(np.linalg.norm(surface.nodes.max(axis=0) - surface.nodes.min(axis=0))) + 1.0
    directions = (
        np.array([1.0, 0.1234567, 0.0765432]),
        np.array([0.0876543, 1.0, 0.1357913]),
        np.array([0.1122334, 0.0998877, 1.0]),
        np.array([-1.0, 0.1987654, -0.0543211]),
    )
    for n, p in enumerate(points):
        if np.any(p < surface.nodes.min(axis=0)) or np.any(p > surface.nodes.max(axis=0)):
            continue
        for direction in directions:
            q = p + 3.0 * span * direction
            seg_lo = np.minimum(p, q)
            seg_hi = np.maximum(p, q)
            cand = np.flatnonzero(np.all(hi >= seg_lo, axis=1) & np.all(lo <= seg_hi, axis=1))
            crossings = 0
            degenerate = False
            for t in cand:
                a, b, c = tri[t]
                s1 = orient3d(a, b, c, p)
                s2 = orient3d(a, b, c, q)
                if s1 == 0 or s1 == s2:
                    continue
                e1 = orient3d(p, q, a, b)
                e2 = orient3d(p, q, b, c)
                e3 = orient3d(p, q, c, a)
                if e1 == 0 or e2 == 0 or e3 == 0:
                    if (e1 >= 0 and e2 >= 0 and e3 >= 0) or (e1 <= 0 and e2 <= 0 and e3 <= 0):
                        degenerate = True
                        break
                    continue
                if e1 == e2 == e3:
                    crossings += 1
            if not degenerate:
                result[n] = crossings % 2 == 1
                break
    return result


# ==============================================================================
# QUALITY & VALIDATION
# ==============================================================================


def quality_report(mesh_or_q: TetMesh | np.ndarray) -> QualityReport:
    q = element_qualities(mesh_or_q.tet_points()) if isinstance(mesh_or_q, TetMesh) else np.asarray(mesh_or_q)
    # bins (0,0.1], ..., (0.9,1.0]; q = 0 lands in the first bin
    idx = np.clip(np.ceil(q * QUALITY_BINS).astype(int) - 1, 0, QUALITY_BINS - 1)
    histogram = np.bincount(idx, minlength=QUALITY_BINS)
    min_q = float(q.min()) if len(q) else 0.0
    fraction_high = float(np.mean(q > 0.9)) if len(q) else 0.0
    return QualityReport(q, histogram, min_q, fraction_high)


def validate(mesh: TetMesh, eps_node: float | None = None) -> ValidationReport:
    """Check every TetMesh invariant without mutating the mesh."""
    assert mesh.region is not None and mesh.node_flags is not None
    violations: list[Violation] = []
    n = mesh.n_nodes
    if mesh.n_tets and (mesh.tets.min() < 0 or mesh.tets.max() >= n):
        bad = np.flatnonzero(np.any((mesh.tets < 0) | (mesh.tets >= n), axis=1))
        violations.extend(Violation("BAD_INDEX", int(t), "node index out of range") for t in bad)
        return ValidationReport(violations)

    if mesh.n_tets:
        pts = mesh.tet_points()
        vol = tet_volumes(pts)
        scale = longest_edges(pts) ** 3
        for t in np.flatnonzero(vol <= 1e-10 * scale):
            if vol[t] <= 0 or orient3d(*pts[t]) <= 0:
                violations.append(Violation("ORIENTATION", int(t), f"signed volume {vol[t]:.3e}"))
        repeated = np.flatnonzero(
            np.array([len(set(tet)) < 4 for tet in mesh.tets.tolist()], dtype=bool)
        )
        violations.extend(Violation("REPEATED_VERTEX", int(t)) for t in repeated)

    faces: dict[FaceKey, list[int]] = defaultdict(list)
    for t, tet in enumerate(mesh.tets.tolist()):
        for f in TET_FACES:
            faces[face_key(tet[f[0]], tet[f[1]], tet[f[2]])].append(t)
    for key, owners in faces.items():
        if len(owners) > 2:
            violations.append(Violation("NON_MANIFOLD", owners[0], f"face {key} shared by {len(owners)} tets"))

    if n > 1:
        eps = node_tolerance(mesh.nodes) if eps_node is None else eps_node
        for i, j in sorted(cKDTree(mesh.nodes).query_pairs(max(eps, 0.0) or 1e-300)):
            violations.append(Violation("DUPLICATE_NODE", int(j), f"node {j} coincides with {i}"))

    valid_regions = [int(r) for r in Region]
    for t in np.flatnonzero(~np.isin(mesh.region, valid_regions)):
        violations.append(Violation("REGION_TAG", int(t), f"unknown region {mesh.region[t]}"))
    atomistic = np.flatnonzero(mesh.region == Region.ATOMISTIC)
    if len(atomistic):
        flags = mesh.node_flags[mesh.tets[atomistic]]
        for t in atomistic[np.any(flags != NodeFlag.ATOM, axis=1)]:
            violations.append(Violation("ATOM_FLAG", int(t), "ATOMISTIC tet with a non-ATOM node"))

    if violations:
        logging.debug(f"validate: {len(violations)} violations ({sorted({v.kind for v in violations})})")
    return ValidationReport(violations)
