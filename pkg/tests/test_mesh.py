import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from acmesh_architect.core.errors import ErrorCode, MeshError
from acmesh_architect.geometry.mesh import (
    NodeFlag,
    Region,
    TetMesh,
    build_adjacency,
    circumsphere,
    element_quality,
    element_qualities,
    extract_boundary,
    face_key,
    points_inside_surface,
    quality_report,
    set_quality,
    tet_volume,
    validate,
)
from acmesh_architect.geometry.predicates import PredicateKernel, Side, insphere, insphere_sign, orient3d

CORNER = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
REGULAR = np.array([[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0]])


def corner_mesh() -> TetMesh:
    return TetMesh(CORNER, [[0, 1, 2, 3]])


# ==============================================================================
# PREDICATES
# ==============================================================================


class TestPredicates:
    """Exact orientation and insphere signs."""

    def test_orient_positive_and_negative(self):
        """The unit corner tet is positively oriented, swapping two vertices flips it."""
        assert orient3d(*CORNER) == 1
        assert orient3d(CORNER[1], CORNER[0], CORNER[2], CORNER[3]) == -1

    def test_orient_coplanar_is_exactly_zero(self):
        """Coplanar points give 0 through the exact fallback."""
        assert orient3d([0, 0, 0], [1, 0, 0], [0, 1, 0], [0.1, 0.3, 0.0]) == 0

    def test_insphere_classification(self):
        """Centre inside, far point outside, a cube corner on the sphere."""
        assert insphere(*CORNER, [0.5, 0.5, 0.5]) == Side.INSIDE
        assert insphere(*CORNER, [2.0, 2.0, 2.0]) == Side.OUTSIDE
        assert insphere(*CORNER, [1.0, 1.0, 0.0]) == Side.ON
        assert insphere_sign(*CORNER, [1.0, 1.0, 1.0]) == 0

    def test_insphere_flat_base_raises(self):
        """A flat base tet has no circumsphere."""
        with pytest.raises(MeshError) as exc:
            insphere([0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1])
        assert exc.value.code == ErrorCode.DEGENERATE_TET

    def test_insphere_is_orientation_independent(self):
        """Swapping two base vertices does not change the classification."""
        swapped = CORNER[[1, 0, 2, 3]]
        assert insphere(*swapped, [0.5, 0.5, 0.5]) == Side.INSIDE

    def test_kernel_perturbation_never_ties(self):
        """Cospherical cube corners are resolved to a strict side."""
        kernel = PredicateKernel(list(CORNER) + [[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
        assert kernel.insphere(0, 1, 2, 3, 4) == 0
        assert kernel.insphere_perturbed([0, 1, 2, 3], 4) in (-1, 1)
        assert kernel.insphere_perturbed([0, 1, 2, 3], 5) in (-1, 1)

    def test_kernel_exact_path_matches_float_path(self):
        """Indexed predicates agree with the free-standing ones on random input."""
        rng = np.random.default_rng(3)
        pts = rng.random((40, 3))
        kernel = PredicateKernel(pts)
        for _ in range(50):
            i, j, k, m = rng.choice(40, 4, replace=False)
            assert kernel.orient(i, j, k, m) == orient3d(pts[i], pts[j], pts[k], pts[m])

    def test_kernel_rejects_non_finite(self):
        """NaN coordinates are degenerate input."""
        with pytest.raises(MeshError) as exc:
            PredicateKernel([[0.0, np.nan, 0.0]])
        assert exc.value.code == ErrorCode.DEGENERATE_INPUT


# ==============================================================================
# QUALITY
# ==============================================================================


class TestQuality:
    """Element quality metric and the histogram report."""

    def test_regular_tet_has_quality_one(self):
        """q = 1 for a regular tetrahedron."""
        assert element_quality(REGULAR) == pytest.approx(1.0, abs=1e-12)

    def test_unit_corner_quality(self):
        """q = 4√3/9 for the unit corner tet."""
        assert element_quality(CORNER) == pytest.approx(4 * np.sqrt(3) / 9, abs=1e-12)

    def test_flat_tet_has_quality_zero(self):
        """A flat tet scores 0."""
        assert element_quality([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]) == 0.0

    def test_scale_and_permutation_invariance(self):
        """Quality ignores uniform scaling, translation and vertex order."""
        rng = np.random.default_rng(0)
        tets = rng.normal(size=(2000, 4, 3))
        q = element_qualities(tets)
        scaled = element_qualities(tets * 7.5 + 3.0)
        permuted = element_qualities(tets[:, [2, 0, 3, 1]])
        assert np.allclose(q, scaled, atol=1e-12)
        assert np.allclose(q, permuted, atol=1e-12)
        assert np.all((q >= 0) & (q <= 1))

    def test_set_quality_is_minimum(self):
        """set_quality returns the worst element quality."""
        assert set_quality([REGULAR, CORNER]) == pytest.approx(element_quality(CORNER))

    def test_set_quality_of_empty_set(self):
        """An empty set has no quality."""
        with pytest.raises(MeshError) as exc:
            set_quality([])
        assert exc.value.code == ErrorCode.EMPTY_SET

    def test_histogram_bins(self):
        """Bins are (0,0.1], ..., (0.9,1.0] with q = 0 in the first bin."""
        report = quality_report(np.array([0.0, 0.05, 0.1, 0.95, 1.0]))
        assert report.histogram[0] == 3
        assert report.histogram[9] == 2
        assert report.histogram.sum() == 5
        assert report.fraction_high == pytest.approx(0.4)
        assert report.min_q == 0.0
        assert report.as_dict()["histogram"][0] == 3


# ==============================================================================
# GEOMETRY HELPERS
# ==============================================================================


class TestElementGeometry:
    """Volumes, circumspheres and closed surfaces."""

    def test_signed_volume(self):
        """Positive for the corner tet, negative when inverted."""
        assert tet_volume(*CORNER) == pytest.approx(1 / 6)
        assert tet_volume(CORNER[1], CORNER[0], CORNER[2], CORNER[3]) == pytest.approx(-1 / 6)

    def test_circumsphere_of_corner(self):
        """Circumcentre (½,½,½), radius √3/2."""
        center, radius = circumsphere(CORNER)
        assert np.allclose(center, 0.5)
        assert radius == pytest.approx(np.sqrt(3) / 2)

    def test_circumsphere_of_flat_tet(self):
        """Flat tets raise DEGENERATE_TET."""
        with pytest.raises(MeshError) as exc:
            circumsphere([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 2, 0]])
        assert exc.value.code == ErrorCode.DEGENERATE_TET

    def test_boundary_of_single_tet(self):
        """Four outward faces, closed, Euler characteristic 2, volume 1/6."""
        surface = extract_boundary(corner_mesh())
        assert surface.n_triangles == 4
        assert surface.is_closed()
        assert surface.euler_characteristic() == 2
        assert surface.enclosed_volume() == pytest.approx(1 / 6)

    def test_boundary_with_region_filter(self):
        """Filtering to one of two tets yields that tet's closed boundary."""
        nodes = np.vstack([CORNER, [[1.0, 1.0, 1.0]]])
        mesh = TetMesh(nodes, [[0, 1, 2, 3], [1, 2, 3, 4]], [Region.ATOMISTIC, Region.CONTINUUM])
        whole = extract_boundary(mesh)
        part = extract_boundary(mesh, [Region.ATOMISTIC])
        assert whole.n_triangles == 6
        assert part.n_triangles == 4
        assert part.enclosed_volume() == pytest.approx(1 / 6)

    def test_points_inside_surface(self):
        """Ray casting against the corner tet boundary."""
        surface = extract_boundary(corner_mesh())
        inside = points_inside_surface(np.array([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9], [-1.0, 0.0, 0.0]]), surface)
        assert inside.tolist() == [True, False, False]

    def test_adjacency_of_two_tets(self):
        """The shared face has two owners, the other six one."""
        nodes = np.vstack([CORNER, [[0.2, 0.2, -1.0]]])
        mesh = TetMesh(nodes, [[0, 1, 2, 3], [0, 2, 1, 4]])
        adjacency = build_adjacency(mesh)
        assert adjacency.interior_faces() == [face_key(0, 1, 2)]
        assert len(adjacency.boundary_faces()) == 6
        assert sorted(adjacency.faces[face_key(2, 1, 0)]) == [0, 1]
        assert sorted(adjacency.neighbors(mesh, 0)).count(-1) == 3

    def test_non_manifold_adjacency(self):
        """A face shared by three tets is rejected."""
        nodes = np.vstack([CORNER, [[0.2, 0.2, -1.0], [0.3, 0.3, 2.0]]])
        mesh = TetMesh(nodes, [[0, 1, 2, 3], [0, 2, 1, 4], [0, 1, 2, 5]])
        with pytest.raises(MeshError) as exc:
            _ = mesh.face_adjacency
        assert exc.value.code == ErrorCode.NON_MANIFOLD


# ==============================================================================
# VALIDATION
# ==============================================================================


class TestValidate:
    """validate() reports every invariant violation without raising."""

    def test_valid_mesh(self):
        """A positive tet validates."""
        assert validate(corner_mesh()).ok

    def test_inverted_tet(self):
        """Negative orientation is reported."""
        report = validate(TetMesh(CORNER, [[1, 0, 2, 3]]))
        assert "ORIENTATION" in report.kinds()

    def test_duplicate_node(self):
        """Coincident nodes are reported."""
        nodes = np.vstack([CORNER, CORNER[:1]])
        assert "DUPLICATE_NODE" in validate(TetMesh(nodes, [[0, 1, 2, 3]])).kinds()

    def test_atomistic_tet_needs_atom_nodes(self):
        """An ATOMISTIC tet with FEM nodes is flagged."""
        mesh = TetMesh(CORNER, [[0, 1, 2, 3]], [Region.ATOMISTIC], [NodeFlag.ATOM] * 3 + [NodeFlag.FEM_NODE])
        assert validate(mesh).kinds() == {"ATOM_FLAG"}

    def test_unknown_region(self):
        """Region tags outside the enum are flagged."""
        assert "REGION_TAG" in validate(TetMesh(CORNER, [[0, 1, 2, 3]], [7])).kinds()

    def test_bad_index(self):
        """Out-of-range node indices stop validation early."""
        assert validate(TetMesh(CORNER, [[0, 1, 2, 9]])).kinds() == {"BAD_INDEX"}

    @pytest.mark.parametrize(
        "tets, extra, flags, code",
        [
            ([[1, 0, 2, 3]], [], None, ErrorCode.DEGENERATE_TET),
            ([[0, 1, 2, 3]], [[0.0, 0.0, 0.0]], None, ErrorCode.DUPLICATE_POINT),
            ([[0, 1, 2, 9]], [], None, ErrorCode.BAD_PRECONDITION),
            ([[0, 1, 2, 3], [0, 2, 1, 4], [0, 1, 2, 5]], [[0.2, 0.2, -1.0], [0.3, 0.3, 2.0]], None, ErrorCode.NON_MANIFOLD),
            ([[0, 1, 2, 3]], [], [NodeFlag.ATOM] * 3 + [NodeFlag.FEM_NODE], ErrorCode.BAD_PRECONDITION),
        ],
    )
    def test_error_code_follows_first_violation(self, tets, extra, flags, code):
        """raise_if_invalid reports the kind of the first violation, not a blanket code."""
        nodes = np.vstack([CORNER, np.asarray(extra, dtype=float).reshape(-1, 3)])
        region = [Region.ATOMISTIC] * len(tets) if flags is not None else None
        report = validate(TetMesh(nodes, tets, region, flags))
        with pytest.raises(MeshError) as exc:
            report.raise_if_invalid("test mesh")
        assert exc.value.code == code
        assert exc.value.details["kinds"] == sorted(report.kinds())

    def test_valid_mesh_does_not_raise(self):
        """A clean report is silent."""
        validate(corner_mesh()).raise_if_invalid("corner")

    def test_defaults_and_copy(self):
        """Missing tags default to CONTINUUM / FEM_NODE / -1 and copies are independent."""
        mesh = corner_mesh()
        assert mesh.region.tolist() == [Region.CONTINUUM]
        assert mesh.node_flags.tolist() == [NodeFlag.FEM_NODE] * 4
        assert mesh.site_ids.tolist() == [-1] * 4
        clone = mesh.copy()
        clone.nodes[0] = 5.0
        assert mesh.nodes[0, 0] == 0.0
