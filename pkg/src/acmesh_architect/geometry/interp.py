"""
Spatial search trees and nodal field transfer between two tet meshes.

Coincident nodes are matched through a Kd-tree and copy their value; every
other target node is located in the old mesh through an AABB tree and gets
the barycentric (P1) interpolant.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from acmesh_architect.geometry.mesh import TetMesh
from acmesh_architect.resources.constants import BARY_EPS, TRANSFER_EPS_REL

AABB_LEAF_SIZE = 8
KD_LEAF_SIZE = 16


# ==============================================================================
# KD-TREE
# ==============================================================================


class KdTree:
    """Immutable Kd-tree over node coordinates."""

    def __init__(self, nodes: np.ndarray, leafsize: int = KD_LEAF_SIZE) -> None:
        self.nodes = np.asarray(nodes, dtype=float).reshape(-1, 3)
        self.leafsize = leafsize
        self._tree = cKDTree(self.nodes, leafsize=leafsize)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        def walk(node) -> int:  # type: ignore[no-untyped-def]
            if node is None or node.split_dim == -1:
                return 0
            return 1 + max(walk(node.lesser), walk(node.greater))

        return walk(self._tree.tree)

    def query_radius(self, p: np.ndarray, radius: float) -> list[int]:
        """Indices of nodes with |x - p| <= radius, ascending."""
        return sorted(int(i) for i in self._tree.query_ball_point(np.asarray(p, dtype=float), radius))

    def nearest(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dist, idx = self._tree.query(np.asarray(points, dtype=float).reshape(-1, 3))
        return np.atleast_1d(dist), np.atleast_1d(idx).astype(np.int64)


def build_kdtree(nodes: np.ndarray) -> KdTree:
    return KdTree(nodes)


# ==============================================================================
# AABB TREE
# ==============================================================================


@dataclass
class AabbTree:
    """
    Bounding-volume hierarchy over tets.

    Node ``k`` covers ``order[start[k]:end[k]]``; leaves have ``left[k] == -1``.
    """

    mesh: TetMesh
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    order: np.ndarray
    tet_lo: np.ndarray = field(repr=False)
    tet_hi: np.ndarray = field(repr=False)

    @property
    def root_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo[0], self.hi[0]

    def candidates_box(self, box_lo: np.ndarray, box_hi: np.ndarray, slack: float = 0.0) -> list[int]:
        """Tets whose bounding box overlaps [box_lo, box_hi] (closed), ascending."""
        if len(self.lo) == 0:
            return []
        box_lo = np.asarray(box_lo, dtype=float) - slack
        box_hi = np.asarray(box_hi, dtype=float) + slack
        out: list[int] = []
        stack = [0]
        while stack:
            k = stack.pop()
            if np.any(self.lo[k] > box_hi) or np.any(self.hi[k] < box_lo):
                continue
            if self.left[k] < 0:
                members = self.order[self.start[k] : self.end[k]]
                hit = np.all(self.tet_lo[members] <= box_hi, axis=1) & np.all(self.tet_hi[members] >= box_lo, axis=1)
                out.extend(int(t) for t in members[hit])
            else:
                stack.extend((int(self.left[k]), int(self.right[k])))
        return sorted(out)

    def candidates(self, p: np.ndarray, slack: float = 0.0) -> list[int]:
        p = np.asarray(p, dtype=float)
        return self.candidates_box(p, p, slack)


def build_aabbtree(mesh: TetMesh, leaf_size: int = AABB_LEAF_SIZE) -> AabbTree:
    pts = mesh.tet_points()
    tet_lo = pts.min(axis=1) if mesh.n_tets else np.zeros((0, 3))
    tet_hi = pts.max(axis=1) if mesh.n_tets else np.zeros((0, 3))
    centers = 0.5 * (tet_lo + tet_hi)
    order = np.arange(mesh.n_tets, dtype=np.int64)
    lo: list[np.ndarray] = []
    hi: list[np.ndarray] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    end: list[int] = []

    def make(s: int, e: int) -> int:
        k = len(lo)
        members = order[s:e]
        lo.append(tet_lo[members].min(axis=0))
        hi.append(tet_hi[members].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        end.append(e)
        return k

    if mesh.n_tets:
        stack = [make(0, mesh.n_tets)]
        while stack:
            k = stack.pop()
            s, e = start[k], end[k]
            if e - s <= leaf_size:
                continue
            axis = int(np.argmax(hi[k] - lo[k]))
            members = order[s:e]
            # stable split at the median centre along the widest axis
            ranked = members[np.lexsort((members, centers[members, axis]))]
            order[s:e] = ranked
            mid = s + (e - s) // 2
            left[k] = make(s, mid)
            right[k] = make(mid, e)
            stack.extend((left[k], right[k]))

    return AabbTree(
        mesh,
        np.asarray(lo).reshape(-1, 3),
        np.asarray(hi).reshape(-1, 3),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(start, dtype=np.int64),
        np.asarray(end, dtype=np.int64),
        order,
        tet_lo,
        tet_hi,
    )


# ==============================================================================
# LOCATION & TRANSFER
# ==============================================================================


def barycentric(points: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Barycentric weights of p in each tet of a (m, 4, 3) batch; NaN rows for flat tets."""
    points = np.asarray(points, dtype=float).reshape(-1, 4, 3)
    a = points[:, 0]
    t = np.stack([points[:, 1] - a, points[:, 2] - a, points[:, 3] - a], axis=2)
    out = np.full((len(points), 4), np.nan)
    det = np.linalg.det(t)
    ok = np.abs(det) > 0
    if np.any(ok):
        lam = np.linalg.solve(t[ok], (np.asarray(p, dtype=float) - a[ok])[..., None])[..., 0]
        out[ok, 1:] = lam
        out[ok, 0] = 1.0 - lam.sum(axis=1)
    return out


def locate(tree: AabbTree, p: np.ndarray, eps_bary: float = BARY_EPS) -> tuple[int, np.ndarray] | None:
    """Lowest-index tet containing p up to ``eps_bary`` on the weights, or None."""
    p = np.asarray(p, dtype=float)
    mesh = tree.mesh
    scale = float(np.max(tree.hi[0] - tree.lo[0])) if len(tree.lo) else 1.0
    cand = tree.candidates(p, slack=eps_bary * scale)
    if not cand:
        return None
    weights = barycentric(mesh.nodes[mesh.tets[cand]], p)
    inside = np.all(weights >= -eps_bary, axis=1)
    if not np.any(inside):
        return None
    k = int(np.flatnonzero(inside)[0])
    return cand[k], weights[k]


def locate_brute_force(mesh: TetMesh, p: np.ndarray, eps_bary: float = BARY_EPS) -> tuple[int, np.ndarray] | None:
    weights = barycentric(mesh.tet_points(), p)
    inside = np.flatnonzero(np.all(weights >= -eps_bary, axis=1))
    if len(inside) == 0:
        return None
    return int(inside[0]), weights[inside[0]]


@dataclass
class TransferResult:
    values: np.ndarray
    copied: np.ndarray
    interpolated: np.ndarray
    fallback: np.ndarray

    @property
    def n_fallback(self) -> int:
        return len(self.fallback)


def transfer(
    old: TetMesh,
    values: np.ndarray,
    new: TetMesh,
    eps: float | None = None,
    eps_bary: float = BARY_EPS,
) -> TransferResult:
    """
    Carry nodal ``values`` from ``old`` onto the nodes of ``new``.

    Nodes that nobody contains get the value of the nearest old node and are
    reported in ``fallback``.
    """
    values = np.asarray(values, dtype=float)
    if len(values) != old.n_nodes:
        raise ValueError(f"expected {old.n_nodes} nodal values, got {len(values)}")
    if eps is None:
        span = float(np.linalg.norm(old.nodes.max(axis=0) - old.nodes.min(axis=0))) if old.n_nodes else 1.0
        eps = TRANSFER_EPS_REL * span
    kd = build_kdtree(old.nodes)
    dist, nearest = kd.nearest(new.nodes)
    out = np.zeros((new.n_nodes, *values.shape[1:]))
    coincident = dist <= eps
    out[coincident] = values[nearest[coincident]]

    tree = build_aabbtree(old)
    interpolated: list[int] = []
    fallback: list[int] = []
    for i in np.flatnonzero(~coincident):
        hit = locate(tree, new.nodes[i], eps_bary)
        if hit is None:
            out[i] = values[nearest[i]]
            fallback.append(int(i))
            continue
        t, w = hit
        out[i] = np.tensordot(w, values[old.tets[t]], axes=1)
        interpolated.append(int(i))

    if fallback:
        logging.warning(
            f"⚠️ transfer: {len(fallback)} nodes outside the old mesh took their nearest-node value "
            f"(first: {fallback[:10]})"
        )
    return TransferResult(
        out,
        np.flatnonzero(coincident),
        np.asarray(interpolated, dtype=np.int64),
        np.asarray(fallback, dtype=np.int64),
    )
