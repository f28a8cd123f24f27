import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from acmesh_architect.geometry.delaunay import triangulate
from acmesh_architect.geometry.interp import (
    barycentric,
    build_aabbtree,
    build_kdtree,
    locate,
    locate_brute_force,
    transfer,
)
from acmesh_architect.geometry.mesh import TetMesh


def random_mesh(n: int = 80, seed: int = 0) -> TetMesh:
    rng = np.random.default_rng(seed)
    corners = np.array([[i, j, k] for i in (0.0, 1.0) for j in (0.0, 1.0) for k in (0.0, 1.0)])
    return triangulate(np.vstack([corners, rng.uniform(0.05, 0.95, (n, 3))]), seed)


def affine(points: np.ndarray) -> np.ndarray:
    return points @ np.array([[1.0, -2.0, 0.5], [0.25, 3.0, 1.0], [-1.0, 0.0, 2.0]]) + np.array([0.3, -0.1, 4.0])


# ==============================================================================
# SEARCH TREES
# ==============================================================================


class TestKdTree:
    """Nearest-node and radius queries."""

    def test_radius_query_matches_brute_force(self):
        """Ball queries return exactly the nodes within the radius."""
        nodes = np.random.default_rng(1).random((500, 3))
        tree = build_kdtree(nodes)
        p = np.array([0.5, 0.5, 0.5])
        expected = np.flatnonzero(np.linalg.norm(nodes - p, axis=1) <= 0.2).tolist()
        assert tree.query_radius(p, 0.2) == expected
        assert len(tree) == 500

    def test_nearest(self):
        """Nearest node of each query point."""
        nodes = np.random.default_rng(2).random((200, 3))
        dist, idx = build_kdtree(nodes).nearest(nodes[[3, 17]] + 1e-9)
        assert idx.tolist() == [3, 17]
        assert np.all(dist < 1e-8)

    def test_depth_is_logarithmic(self):
        """A balanced build stays shallow."""
        tree = build_kdtree(np.random.default_rng(3).random((4096, 3)))
        assert 0 < tree.depth <= 2 * int(np.ceil(np.log2(4096)))


class TestAabbTree:
    """Bounding-box hierarchy over tets."""

    def test_box_candidates_match_brute_force(self):
        """The tree returns every tet whose box overlaps the query box."""
        mesh = random_mesh()
        tree = build_aabbtree(mesh)
        pts = mesh.tet_points()
        lo, hi = np.array([0.2, 0.2, 0.2]), np.array([0.4, 0.5, 0.6])
        expected = np.flatnonzero(np.all(pts.min(axis=1) <= hi, axis=1) & np.all(pts.max(axis=1) >= lo, axis=1))
        assert tree.candidates_box(lo, hi) == expected.tolist()

    def test_root_box(self):
        """The root covers the whole mesh."""
        lo, hi = build_aabbtree(random_mesh()).root_box
        assert np.allclose(lo, 0.0)
        assert np.allclose(hi, 1.0)


# ==============================================================================
# POINT LOCATION
# ==============================================================================


class TestLocate:
    """Barycentric point location."""

    def test_barycentric_weights(self):
        """Weights sum to one and reproduce the point."""
        corner = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
        w = barycentric(corner, np.array([0.1, 0.2, 0.3]))[0]
        assert np.allclose(w, [0.4, 0.1, 0.2, 0.3])

    def test_tree_agrees_with_brute_force(self):
        """The tree finds the same (lowest-index) tet as a linear scan."""
        mesh = random_mesh(seed=4)
        tree = build_aabbtree(mesh)
        for p in np.random.default_rng(5).random((200, 3)):
            hit = locate(tree, p)
            ref = locate_brute_force(mesh, p)
            assert hit is not None and ref is not None
            assert hit[0] == ref[0]
            assert np.allclose(hit[1], ref[1])

    def test_outside_point(self):
        """Points outside the mesh are not located."""
        mesh = random_mesh()
        assert locate(build_aabbtree(mesh), np.array([2.0, 0.5, 0.5])) is None
        assert locate_brute_force(mesh, np.array([2.0, 0.5, 0.5])) is None


# ==============================================================================
# FIELD TRANSFER
# ==============================================================================


class TestTransfer:
    """Nodal interpolation between meshes."""

    def test_affine_field_is_reproduced(self):
        """P1 interpolation is exact for affine fields."""
        old = random_mesh(60, seed=6)
        new = random_mesh(90, seed=7)
        result = transfer(old, affine(old.nodes), new)
        assert result.n_fallback == 0
        assert np.allclose(result.values, affine(new.nodes), atol=1e-10)

    def test_coincident_nodes_are_copied(self):
        """Shared nodes copy their value; the rest are interpolated."""
        old = random_mesh(30, seed=8)
        values = np.random.default_rng(9).random((old.n_nodes, 3))
        extra = np.vstack([old.nodes, [[0.5, 0.5, 0.5]]])
        new = triangulate(extra, 1)
        result = transfer(old, values, new)
        assert np.array_equal(result.values[: old.n_nodes], values)
        assert result.copied.tolist() == list(range(old.n_nodes))
        assert result.interpolated.tolist() == [old.n_nodes]

    def test_outside_nodes_fall_back(self):
        """Nodes outside the old mesh take their nearest old value."""
        old = random_mesh(20, seed=10)
        values = np.arange(old.n_nodes, dtype=float)
        new = triangulate(np.vstack([old.nodes, [[1.5, 1.5, 1.5]]]), 0)
        result = transfer(old, values, new)
        assert result.fallback.tolist() == [old.n_nodes]
        corner = int(np.argmin(np.linalg.norm(old.nodes - 1.0, axis=1)))
        assert result.values[-1] == values[corner]

    def test_value_count_mismatch(self):
        """One value per old node is required."""
        old = random_mesh(10)
        with pytest.raises(ValueError):
            transfer(old, np.zeros(3), old)
