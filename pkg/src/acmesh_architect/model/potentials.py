"""
Site potentials V_ℓ for the atomistic and Cauchy–Born energies.

Every potential is written as pair + embedding terms over the bonds of a
site, all radial functions smoothly switched off on [0.9·r_cut, r_cut]:

    V_ℓ = ½ Σ_b φ(r_b) + F(Σ_b ψ(r_b))

Pure pair potentials have no density and skip the embedding term.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from acmesh_architect.core.errors import ErrorCode, ModelError
from acmesh_architect.resources.constants import CU_LATTICE_CONSTANT, MORSE_CU

TAPER_START = 0.9
# Bonds shorter than this fraction of the equilibrium spacing are flagged
BLOWUP_FRACTION = 0.5


def smooth_cutoff(r: np.ndarray, r_cut: float, start: float = TAPER_START) -> tuple[np.ndarray, np.ndarray]:
    """Quintic switching function S(r) and S'(r): 1 below start·r_cut, 0 above r_cut, C² in between."""
    r = np.asarray(r, dtype=float)
    r_in = start * r_cut
    width = r_cut - r_in
    t = np.clip((r - r_in) / width, 0.0, 1.0)
    s = 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t**2)
    ds = -30.0 * t**2 * (1.0 - t) ** 2 / width
    return s, ds


@dataclass
class SiteEnergies:
    energy: np.ndarray
    bond_gradient: np.ndarray
    short_bonds: int = 0


class SitePotential(ABC):
    kind: str = ""
    r_cut: float

    @abstractmethod
    def pair(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Raw pair term φ(r), φ'(r) before tapering."""

    def density(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        return None

    def embed(self, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros_like(rho), np.zeros_like(rho)

    @property
    def equilibrium_spacing(self) -> float:
        return self.r_cut

    @property
    def many_body(self) -> bool:
        return self.density(np.ones(1)) is not None

    def tapered_pair(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        phi, dphi = self.pair(r)
        s, ds = smooth_cutoff(r, self.r_cut)
        return phi * s, dphi * s + phi * ds

    def tapered_density(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        out = self.density(r)
        if out is None:
            return None
        psi, dpsi = out
        s, ds = smooth_cutoff(r, self.r_cut)
        return psi * s, dpsi * s + psi * ds

    def site_energies(self, bond_site: np.ndarray, bond_vectors: np.ndarray, n_sites: int) -> SiteEnergies:
        """
        Per-site energies V_ℓ for bonds grouped by owning site, and the
        derivative of each owning site's energy with respect to its bond vector.
        """
        bond_vectors = np.asarray(bond_vectors, dtype=float).reshape(-1, 3)
        r = np.linalg.norm(bond_vectors, axis=1)
        if np.any(r <= 0):
            raise ModelError(ErrorCode.INVERTED_DEFORMATION, "two sites collapsed onto each other")
        phi, dphi = self.tapered_pair(r)
        energy = 0.5 * np.bincount(bond_site, weights=phi, minlength=n_sites)
        coef = 0.5 * dphi
        dens = self.tapered_density(r)
        if dens is not None:
            psi, dpsi = dens
            rho = np.bincount(bond_site, weights=psi, minlength=n_sites)
            f, df = self.embed(rho)
            energy = energy + f
            coef = coef + df[bond_site] * dpsi
        short = int(np.count_nonzero(r < BLOWUP_FRACTION * self.equilibrium_spacing))
        return SiteEnergies(energy, (coef / r)[:, None] * bond_vectors, short)

    def homogeneous_energy(self, offsets: np.ndarray) -> tuple[float, np.ndarray]:
        """V(ℛ) for one site with bond vectors ``offsets`` and dV/dρ per bond."""
        out = self.site_energies(np.zeros(len(offsets), dtype=np.int64), offsets, 1)
        return float(out.energy[0]), out.bond_gradient

    def describe(self) -> dict:
        return {"kind": self.kind, "r_cut": self.r_cut}


class MorsePotential(SitePotential):
    """Morse pair potential φ(r) = D·e·(e − 2) with e = exp(α(r₀ − r))."""

    kind = "MORSE_PAIR"

    def __init__(
        self,
        depth: float = MORSE_CU["depth"],
        alpha: float = MORSE_CU["alpha"],
        r0: float = MORSE_CU["r0"],
        r_cut: float = 1.5 * CU_LATTICE_CONSTANT,
    ) -> None:
        if depth <= 0 or alpha <= 0 or r0 <= 0 or r_cut <= 0:
            raise ModelError(
                ErrorCode.BAD_PRECONDITION,
                "Morse parameters must be positive",
                {"depth": depth, "alpha": alpha, "r0": r0, "r_cut": r_cut},
            )
        self.depth = float(depth)
        self.alpha = float(alpha)
        self.r0 = float(r0)
        self.r_cut = float(r_cut)

    @property
    def equilibrium_spacing(self) -> float:
        return self.r0

    def pair(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        expf = np.exp(self.alpha * (self.r0 - r))
        return self.depth * expf * (expf - 2.0), -2.0 * self.alpha * self.depth * expf * (expf - 1.0)

    def describe(self) -> dict:
        return {**super().describe(), "depth": self.depth, "alpha": self.alpha, "r0": self.r0}


class FinnisSinclairPotential(SitePotential):
    """
    Analytic EAM with Finnis–Sinclair embedding F(ρ) = −A√ρ, Born–Mayer pair
    repulsion φ(r) = B·exp(−p(r/r_e − 1)) and density ψ(r) = exp(−q(r/r_e − 1)).
    """

    kind = "EAM_ANALYTIC"

    def __init__(
        self,
        a_embed: float = 1.8,
        b_pair: float = 0.6,
        p: float = 9.0,
        q: float = 3.0,
        r_e: float = CU_LATTICE_CONSTANT / np.sqrt(2.0),
        r_cut: float = 1.5 * CU_LATTICE_CONSTANT,
    ) -> None:
        if min(a_embed, b_pair, p, q, r_e, r_cut) <= 0:
            raise ModelError(ErrorCode.BAD_PRECONDITION, "EAM parameters must be positive")
        self.a_embed = float(a_embed)
        self.b_pair = float(b_pair)
        self.p = float(p)
        self.q = float(q)
        self.r_e = float(r_e)
        self.r_cut = float(r_cut)

    @property
    def equilibrium_spacing(self) -> float:
        return self.r_e

    def pair(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        phi = self.b_pair * np.exp(-self.p * (r / self.r_e - 1.0))
        return phi, -self.p / self.r_e * phi

    def density(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        psi = np.exp(-self.q * (np.asarray(r, dtype=float) / self.r_e - 1.0))
        return psi, -self.q / self.r_e * psi

    def embed(self, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rho = np.asarray(rho, dtype=float)
        root = np.sqrt(np.maximum(rho, 0.0))
        d = np.zeros_like(rho)
        pos = root > 0
        d[pos] = -0.5 * self.a_embed / root[pos]
        return -self.a_embed * root, d

    def describe(self) -> dict:
        return {
            **super().describe(),
            "a_embed": self.a_embed,
            "b_pair": self.b_pair,
            "p": self.p,
            "q": self.q,
            "r_e": self.r_e,
        }


def warn_short_bonds(count: int, where: str) -> None:
    if count:
        logging.warning(f"⚠️ BLOWUP: {count} bonds in {where} are shorter than the potential's valid range")
