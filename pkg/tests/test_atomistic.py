import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial import ConvexHull

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from acmesh_architect.core.errors import ErrorCode, MeshError
from acmesh_architect.geometry.atomistic import (
    DeletionParams,
    boundary_adjacent,
    build_atomistic_mesh,
    compute_rmax,
    delete_elements,
)
from acmesh_architect.geometry.mesh import (
    NodeFlag,
    Region,
    circumradii,
    extract_boundary,
    points_inside_surface,
    tet_volumes,
    validate,
)


def cubic_grid(n: int = 3, spacing: float = 1.0) -> np.ndarray:
    axis = spacing * np.arange(n, dtype=float)
    return np.array([[x, y, z] for x in axis for y in axis for z in axis])


def grid_with_straggler() -> np.ndarray:
    """A 3x3x3 block plus one atom far off the +x face."""
    return np.vstack([cubic_grid(), [[6.0, 1.0, 1.0]]])


def dumbbell(radius: float = 2.5, gap: float = 3.5) -> np.ndarray:
    """Two balls of grid atoms at x = ±gap joined by a 3x3 neck, lightly jittered."""
    axis = np.arange(-7.0, 8.0)
    span = np.arange(-3.0, 4.0)
    grid = np.array([[x, y, z] for x in axis for y in span for z in span])
    in_ball = np.minimum(
        np.linalg.norm(grid - [gap, 0.0, 0.0], axis=1), np.linalg.norm(grid + [gap, 0.0, 0.0], axis=1)
    ) <= radius
    in_neck = (np.abs(grid[:, 0]) <= gap) & (np.abs(grid[:, 1:]).max(axis=1) <= 1.0)
    atoms = grid[in_ball | in_neck]
    return atoms + np.random.default_rng(5).uniform(-0.02, 0.02, atoms.shape)


# ==============================================================================
# R_MAX
# ==============================================================================


class TestRmax:
    """Deletion threshold from nearest-neighbour distances."""

    def test_rmax_on_grid(self):
        """c_r times the grid spacing."""
        assert compute_rmax(cubic_grid(spacing=2.0), 1.05) == pytest.approx(2.1)

    def test_rmax_uses_the_largest_gap(self):
        """The straggler sets the nearest-neighbour maximum."""
        assert compute_rmax(grid_with_straggler(), 1.0) == pytest.approx(4.0)

    def test_too_few_atoms(self):
        """One atom has no neighbour."""
        with pytest.raises(MeshError) as exc:
            compute_rmax(np.zeros((1, 3)))
        assert exc.value.code == ErrorCode.TOO_FEW_ATOMS

    def test_non_positive_rmax(self):
        """DeletionParams rejects r_max <= 0."""
        with pytest.raises(MeshError) as exc:
            DeletionParams(0.0)
        assert exc.value.code == ErrorCode.BAD_PRECONDITION


# ==============================================================================
# DELETION
# ==============================================================================


class TestDeletion:
    """Peeling oversized boundary tets."""

    def test_straggler_is_peeled_off(self):
        """Every tet reaching the far atom goes, the block stays and the atom is orphaned."""
        result = build_atomistic_mesh(grid_with_straggler(), r_max=1.0)
        mesh = result.mesh
        assert validate(mesh).ok
        assert 27 not in np.unique(mesh.tets)
        assert result.orphans.tolist() == [27]
        assert result.n_deleted > 0
        assert tet_volumes(mesh.tet_points()).sum() == pytest.approx(8.0)

    def test_no_oversized_boundary_tet_survives(self):
        """After deletion every boundary-adjacent tet has circumradius <= r_max."""
        result = build_atomistic_mesh(grid_with_straggler(), r_max=1.0)
        mesh = result.mesh
        alive = np.ones(mesh.n_tets, dtype=bool)
        edge = boundary_adjacent(mesh.tets, alive, mesh.face_adjacency.faces)
        assert np.all(circumradii(mesh.tet_points())[edge] <= 1.0)

    def test_deletion_is_idempotent(self):
        """Running deletion on its own output deletes nothing."""
        first = build_atomistic_mesh(grid_with_straggler(), r_max=1.0)
        second = delete_elements(first.mesh, DeletionParams(1.0))
        assert second.n_deleted == 0
        assert second.mesh.sorted_tet_set() == first.mesh.sorted_tet_set()
        assert len(second.orphans) == 0

    def test_coordinates_and_tags(self):
        """Atoms are never moved and every node is an ATOM in an ATOMISTIC mesh."""
        atoms = grid_with_straggler()
        result = build_atomistic_mesh(atoms, site_ids=np.arange(100, 128), r_max=1.0)
        assert np.array_equal(result.mesh.nodes, atoms)
        assert np.all(result.mesh.node_flags == NodeFlag.ATOM)
        assert np.all(result.mesh.region == Region.ATOMISTIC)
        assert result.mesh.site_ids.tolist() == list(range(100, 128))

    def test_default_rmax_keeps_the_block(self):
        """With the default multiplier a regular block loses nothing."""
        result = build_atomistic_mesh(cubic_grid())
        assert result.n_deleted == 0
        assert tet_volumes(result.mesh.tet_points()).sum() == pytest.approx(8.0)

    def test_everything_deleted(self):
        """A tiny r_max peels the whole mesh away."""
        with pytest.raises(MeshError) as exc:
            build_atomistic_mesh(cubic_grid(2), r_max=0.1)
        assert exc.value.code == ErrorCode.MESH_VANISHED


class TestDumbbell:
    """Deletion carves the concave pockets out of a two-ball cluster."""

    R_MAX = 1.2

    @pytest.fixture(scope="class")
    def carved(self):
        return build_atomistic_mesh(dumbbell(), r_max=self.R_MAX)

    def test_exhaustive_circumradius_scan(self, carved):
        """Every surviving tet is either interior or within r_max."""
        mesh = carved.mesh
        assert validate(mesh).ok
        radii = circumradii(mesh.tet_points())
        edge = boundary_adjacent(mesh.tets, np.ones(mesh.n_tets, dtype=bool), mesh.face_adjacency.faces)
        for t in range(mesh.n_tets):
            if edge[t]:
                assert radii[t] <= self.R_MAX, f"boundary tet {t} has circumradius {radii[t]:.3f}"

    def test_pockets_are_removed(self, carved):
        """The hull fill between the balls is gone, the balls and the neck stay."""
        mesh = carved.mesh
        assert carved.n_deleted > 0
        assert tet_volumes(mesh.tet_points()).sum() < 0.8 * ConvexHull(dumbbell()).volume
        points = np.array([[0.0, 2.0, 0.0], [0.0, 0.0, -2.0], [3.5, 0.2, 0.3], [-3.5, 0.3, 0.2], [0.5, 0.5, 0.5]])
        assert points_inside_surface(points, extract_boundary(mesh)).tolist() == [False, False, True, True, True]

    def test_deletion_is_idempotent(self, carved):
        """Deleting again with the same r_max is a no-op."""
        again = delete_elements(carved.mesh, DeletionParams(self.R_MAX))
        assert again.n_deleted == 0
        assert again.mesh.sorted_tet_set() == carved.mesh.sorted_tet_set()
        assert np.array_equal(again.mesh.nodes, carved.mesh.nodes)
