import logging
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from acmesh_architect.core.errors import ErrorCode, ModelError
from acmesh_architect.geometry.continuum import DomainSpec
from acmesh_architect.model.lattice import (
    Structure,
    Void,
    build_lattice,
    finite_difference_stencil,
    homogeneous_stencil,
    radial_distance,
    sites_within,
)
from acmesh_architect.model.potentials import (
    FinnisSinclairPotential,
    MorsePotential,
    smooth_cutoff,
    warn_short_bonds,
)

A = 3.615


def small_domain(cells: float = 3.0) -> DomainSpec:
    return DomainSpec("box", extent=(cells * A,) * 3, boundary_spacing=A)


def fd_bond_gradient(potential, bond_site, vectors, n_sites, h=1e-6):
    """Central differences of the summed site energies with respect to each bond vector."""
    out = np.zeros_like(vectors)
    for b in range(len(vectors)):
        for i in range(3):
            plus, minus = vectors.copy(), vectors.copy()
            plus[b, i] += h
            minus[b, i] -= h
            e_plus = potential.site_energies(bond_site, plus, n_sites).energy.sum()
            e_minus = potential.site_energies(bond_site, minus, n_sites).energy.sum()
            out[b, i] = (e_plus - e_minus) / (2 * h)
    return out


# ==============================================================================
# LATTICE
# ==============================================================================


class TestLattice:
    """Site generation, voids, neighbours and stencils."""

    def test_stencil_sizes(self):
        """Neighbour shells inside 1.5a: 12+6+24+12 for FCC, 8+6+12 for BCC."""
        assert len(homogeneous_stencil(Structure.FCC, A, 1.5 * A)) == 54
        assert len(homogeneous_stencil(Structure.BCC, A, 1.5 * A)) == 26

    def test_stencil_is_symmetric_and_sorted(self):
        """ρ in ℛ implies -ρ in ℛ; the nearest shell comes first."""
        stencil = homogeneous_stencil(Structure.FCC, A, 1.5 * A)
        as_set = {tuple(np.round(r, 9)) for r in stencil}
        assert all(tuple(np.round(-r, 9)) in as_set for r in stencil)
        norms = np.linalg.norm(stencil, axis=1)
        assert np.all(np.diff(np.round(norms, 9)) >= 0)
        assert norms[0] == pytest.approx(A / np.sqrt(2))

    def test_cell_quantities(self):
        """Primitive volume and nearest-neighbour distance."""
        fcc = build_lattice("FCC", A, small_domain())
        bcc = build_lattice("BCC", A, small_domain())
        assert fcc.site_volume == pytest.approx(A**3 / 4)
        assert bcc.site_volume == pytest.approx(A**3 / 2)
        assert fcc.nn_distance == pytest.approx(A / np.sqrt(2))
        assert bcc.nn_distance == pytest.approx(A * np.sqrt(3) / 2)

    def test_padding_and_free_sites(self):
        """Sites cover the domain plus padding; free sites are strictly inside."""
        domain = small_domain()
        lattice = build_lattice("FCC", A, domain)
        lo, hi = domain.bounds()
        assert np.all(lattice.sites.min(axis=0) < lo - lattice.r_cut)
        assert np.all(lattice.sites.max(axis=0) > hi + lattice.r_cut)
        assert np.all(domain.depth(lattice.sites[lattice.free]) > 0)
        assert np.all(domain.depth(lattice.sites[~lattice.free]) <= 1e-9 * A)
        assert lattice.site_ids.tolist() == list(range(lattice.n_sites))

    def test_void_removes_sites(self):
        """No site lies inside a void, and the homogeneous lattice restores them."""
        void = Void([0.0, 0.0, 0.0], 0.8 * A)
        lattice = build_lattice("FCC", A, small_domain(), [void])
        assert np.all(np.linalg.norm(lattice.sites, axis=1) >= 0.8 * A)
        full = lattice.homogeneous()
        assert full.n_sites > lattice.n_sites
        assert full.voids == []

    def test_bad_geometry(self):
        """Non-positive lattice constants and voids leaving the domain are rejected."""
        with pytest.raises(ModelError) as exc:
            build_lattice("FCC", -1.0, small_domain())
        assert exc.value.code == ErrorCode.BAD_GEOMETRY
        with pytest.raises(ModelError) as exc:
            build_lattice("FCC", A, small_domain(), [Void([1.4 * A, 0.0, 0.0], 0.5 * A)])
        assert exc.value.code == ErrorCode.BAD_GEOMETRY

    def test_neighbor_pairs(self):
        """Pairs are unique, ordered and within the cutoff."""
        lattice = build_lattice("BCC", A, small_domain(2.0))
        pairs = lattice.neighbor_pairs()
        assert np.all(pairs[:, 0] < pairs[:, 1])
        assert len({tuple(p) for p in pairs.tolist()}) == len(pairs)
        lengths = np.linalg.norm(lattice.sites[pairs[:, 1]] - lattice.sites[pairs[:, 0]], axis=1)
        assert np.all(lengths <= lattice.r_cut * (1 + 1e-12))

    def test_interior_site_sees_the_full_stencil(self):
        """A site at the centre has exactly the homogeneous neighbour set."""
        lattice = build_lattice("FCC", A, small_domain())
        centre = int(np.argmin(np.linalg.norm(lattice.sites, axis=1)))
        offsets = lattice.sites[lattice.neighbors(centre)] - lattice.sites[centre]
        assert len(offsets) == len(lattice.stencil)

    def test_finite_differences_of_affine_field(self):
        """u = Gx gives differences Gρ on free neighbours and clamps the rest."""
        lattice = build_lattice("FCC", A, small_domain())
        grad = np.array([[0.01, 0.002, 0.0], [0.0, -0.02, 0.003], [0.001, 0.0, 0.015]])
        u = lattice.sites @ grad.T
        centre = int(np.argmin(np.linalg.norm(lattice.sites, axis=1)))
        offsets, diffs = finite_difference_stencil(lattice, u, centre)
        assert np.allclose(diffs, offsets @ grad.T)

    def test_radial_distance_and_sites_within(self):
        """Distance to the nearest of several centres."""
        centers = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
        assert radial_distance(np.array([[7.0, 0.0, 0.0]]), centers)[0] == pytest.approx(3.0)
        lattice = build_lattice("FCC", A, small_domain())
        inner = sites_within(lattice, np.zeros((1, 3)), A)
        assert np.all(np.linalg.norm(lattice.sites[inner], axis=1) < A)
        assert np.all(lattice.free[inner])


# ==============================================================================
# POTENTIALS
# ==============================================================================


class TestSmoothCutoff:
    """Quintic taper on [0.9 r_cut, r_cut]."""

    def test_plateaus(self):
        """One inside, zero beyond, one half in the middle of the taper."""
        s, _ = smooth_cutoff(np.array([1.0, 8.9, 9.5, 10.0, 12.0]), 10.0)
        assert np.allclose(s, [1.0, 1.0, 0.5, 0.0, 0.0])

    def test_derivative(self):
        """S' matches central differences."""
        r = np.linspace(8.95, 9.95, 11)
        h = 1e-6
        _, ds = smooth_cutoff(r, 10.0)
        fd = (smooth_cutoff(r + h, 10.0)[0] - smooth_cutoff(r - h, 10.0)[0]) / (2 * h)
        assert np.allclose(ds, fd, atol=1e-6)


class TestPotentials:
    """Site energies and bond gradients."""

    def test_morse_minimum(self):
        """φ(r0) = -D with zero slope."""
        morse = MorsePotential()
        phi, dphi = morse.pair(np.array([morse.r0]))
        assert phi[0] == pytest.approx(-morse.depth)
        assert dphi[0] == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("potential", [MorsePotential(), FinnisSinclairPotential()], ids=["morse", "eam"])
    def test_bond_gradient(self, potential):
        """Analytic bond gradients match finite differences, including the taper region."""
        rng = np.random.default_rng(0)
        directions = rng.normal(size=(12, 3))
        directions /= np.linalg.norm(directions, axis=1)[:, None]
        lengths = rng.uniform(0.7 * potential.equilibrium_spacing, potential.r_cut, 12)
        vectors = directions * lengths[:, None]
        bond_site = np.repeat([0, 1, 2], 4)
        out = potential.site_energies(bond_site, vectors, 3)
        fd = fd_bond_gradient(potential, bond_site, vectors, 3)
        assert np.allclose(out.bond_gradient, fd, rtol=1e-5, atol=1e-7)

    def test_many_body_flag(self):
        """Only the EAM potential has an embedding term."""
        assert not MorsePotential().many_body
        assert FinnisSinclairPotential().many_body

    def test_collapsed_bond(self):
        """A zero-length bond is an inverted deformation."""
        with pytest.raises(ModelError) as exc:
            MorsePotential().site_energies(np.zeros(1, dtype=np.int64), np.zeros((1, 3)), 1)
        assert exc.value.code == ErrorCode.INVERTED_DEFORMATION

    def test_short_bonds_are_counted(self, caplog):
        """Bonds below half the equilibrium spacing are reported."""
        morse = MorsePotential()
        vectors = np.array([[0.4 * morse.r0, 0.0, 0.0], [morse.r0, 0.0, 0.0]])
        out = morse.site_energies(np.zeros(2, dtype=np.int64), vectors, 1)
        assert out.short_bonds == 1
        with caplog.at_level(logging.WARNING):
            warn_short_bonds(out.short_bonds, "a test")
        assert "BLOWUP" in caplog.text

    def test_bad_parameters(self):
        """Non-positive parameters are rejected."""
        with pytest.raises(ModelError):
            MorsePotential(depth=-1.0)
        with pytest.raises(ModelError):
            FinnisSinclairPotential(p=0.0)

    def test_homogeneous_energy_is_finite(self):
        """V(ℛ) of the Cu lattice is negative for both potentials."""
        stencil = homogeneous_stencil(Structure.FCC, A, 1.5 * A)
        for potential in (MorsePotential(), FinnisSinclairPotential()):
            energy, grad = potential.homogeneous_energy(stencil)
            assert np.isfinite(energy) and energy < 0
            assert np.allclose(grad.sum(axis=0), 0.0, atol=1e-10)
