"""
Bravais lattices with spherical voids, padded beyond the computational
domain, plus neighbour lists and finite-difference stencils.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from acmesh_architect.core.errors import ErrorCode, ModelError
from acmesh_architect.geometry.continuum import DomainShape, DomainSpec
from acmesh_architect.resources.constants import NN_FACTOR

# Sites closer than this fraction of a to the boundary count as on it
BOUNDARY_EPS_REL = 1e-9


class Structure(str, Enum):
    FCC = "FCC"
    BCC = "BCC"


# Conventional cubic basis in units of the lattice constant
BASIS: dict[Structure, np.ndarray] = {
    Structure.FCC: np.array([[0.0, 0.0, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]),
    Structure.BCC: np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]),
}

# Primitive cell vectors (rows) in units of the lattice constant
PRIMITIVE: dict[Structure, np.ndarray] = {
    Structure.FCC: 0.5 * np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]),
    Structure.BCC: 0.5 * np.array([[-1.0, 1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, -1.0]]),
}


@dataclass
class Void:
    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.radius = float(self.radius)


@dataclass
class Lattice:
    """
    Lattice sites Λ with the interaction stencil ℛ of the homogeneous lattice.

    ``free[i]`` marks sites strictly inside the domain; all other sites are
    clamped (zero displacement). Site ids equal array indices.
    """

    structure: Structure
    a: float
    sites: np.ndarray
    free: np.ndarray
    r_cut: float
    domain: DomainSpec
    voids: list[Void] = field(default_factory=list)
    stencil: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    _tree: cKDTree | None = field(default=None, repr=False)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def site_ids(self) -> np.ndarray:
        return np.arange(self.n_sites, dtype=np.int64)

    @property
    def cell(self) -> np.ndarray:
        """Primitive lattice matrix 𝗔 (columns are lattice vectors)."""
        return self.a * PRIMITIVE[self.structure].T

    @property
    def site_volume(self) -> float:
        return float(abs(np.linalg.det(self.cell)))

    @property
    def nn_distance(self) -> float:
        return self.a * NN_FACTOR[self.structure.value]

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.sites)
        return self._tree

    def neighbor_pairs(self) -> np.ndarray:
        """Unordered pairs (i < j) with 0 < |x_i - x_j| <= r_cut, lexicographically sorted."""
        pairs = self.tree.query_pairs(self.r_cut, output_type="ndarray")
        if len(pairs) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = np.sort(pairs, axis=1)
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))].astype(np.int64)

    def neighbors(self, i: int) -> np.ndarray:
        """𝒩_ℓ of site i, ascending."""
        idx = self.tree.query_ball_point(self.sites[i], self.r_cut)
        return np.asarray(sorted(j for j in idx if j != i), dtype=np.int64)

    def with_voids(self, voids: list[Void]) -> "Lattice":
        return build_lattice(self.structure, self.a, self.domain, voids, self.r_cut / self.a)

    def homogeneous(self) -> "Lattice":
        return self.with_voids([])


def homogeneous_stencil(structure: Structure, a: float, r_cut: float) -> np.ndarray:
    """All lattice vectors ρ with 0 < |ρ| <= r_cut, sorted by length then lexicographically."""
    n = int(np.ceil(r_cut / a)) + 1
    rng = np.arange(-n, n + 1)
    cells = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    points = (cells[:, None, :] + BASIS[structure][None, :, :]).reshape(-1, 3) * a
    norms = np.linalg.norm(points, axis=1)
    keep = (norms > 1e-12 * a) & (norms <= r_cut * (1 + 1e-12))
    points = np.round(points[keep] / a * 2) * a / 2
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], np.round(np.linalg.norm(points, axis=1), 9)))
    return points[order]


def build_lattice(
    structure: Structure | str,
    a: float,
    domain: DomainSpec,
    voids: list[Void] | None = None,
    r_cut_cells: float = 1.5,
) -> Lattice:
    """
    Sites of the Bravais lattice (origin at the domain centre) covering the
    domain plus a 2·r_cut padding shell, with atoms inside any void removed.
    """
    structure = Structure(structure)
    voids = list(voids or [])
    if not a > 0:
        raise ModelError(ErrorCode.BAD_GEOMETRY, f"lattice constant must be positive, got {a}")
    r_cut = float(r_cut_cells) * a
    if not r_cut > 0:
        raise ModelError(ErrorCode.BAD_GEOMETRY, f"cutoff must be positive, got {r_cut}")
    lo, hi = domain.bounds()
    for k, void in enumerate(voids):
        if not void.radius > 0:
            raise ModelError(ErrorCode.BAD_GEOMETRY, f"void {k} has non-positive radius {void.radius}")
        inside = (
            np.all(void.center - void.radius > lo) and np.all(void.center + void.radius < hi)
            if domain.shape == DomainShape.BOX
            else np.linalg.norm(void.center - np.asarray(domain.center)) + void.radius < domain.extent[0]
        )
        if not inside:
            raise ModelError(ErrorCode.BAD_GEOMETRY, f"void {k} at {void.center.tolist()} is not inside the domain")

    pad = 2.0 * r_cut
    origin = np.asarray(domain.center, dtype=float)
    n_lo = np.floor((lo - pad - origin) / a).astype(int) - 1
    n_hi = np.ceil((hi + pad - origin) / a).astype(int) + 1
    axes = [np.arange(n_lo[i], n_hi[i] + 1) for i in range(3)]
    cells = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sites = origin + a * (cells[:, None, :] + BASIS[structure][None, :, :]).reshape(-1, 3)

    if domain.shape == DomainShape.BOX:
        keep = np.all((sites >= lo - pad) & (sites <= hi + pad), axis=1)
    else:
        keep = np.linalg.norm(sites - origin, axis=1) <= domain.extent[0] + pad
    for void in voids:
        keep &= np.linalg.norm(sites - void.center, axis=1) >= void.radius
    sites = sites[keep]
    sites = sites[np.lexsort((sites[:, 0], sites[:, 1], sites[:, 2]))]

    lattice = Lattice(
        structure,
        float(a),
        sites,
        domain.depth(sites) > BOUNDARY_EPS_REL * a,
        r_cut,
        domain,
        voids,
        homogeneous_stencil(structure, a, r_cut),
    )
    logging.debug(
        f"build_lattice: {structure.value} a={a:.4g}, {lattice.n_sites} sites "
        f"({int(lattice.free.sum())} free), {len(voids)} voids, |ℛ|={len(lattice.stencil)}"
    )
    return lattice


def finite_difference_stencil(lattice: Lattice, u: np.ndarray, site: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Offsets ρ ∈ ℛ_ℓ present at ``site`` and the differences u(ℓ+ρ) - u(ℓ),
    with clamped sites contributing zero displacement.
    """
    u = np.where(lattice.free[:, None], np.asarray(u, dtype=float).reshape(-1, 3), 0.0)
    nbrs = lattice.neighbors(site)
    offsets = lattice.sites[nbrs] - lattice.sites[site]
    return offsets, u[nbrs] - u[site]


def sites_within(lattice: Lattice, centers: np.ndarray, radius: float, free_only: bool = True) -> np.ndarray:
    """Indices of sites closer than ``radius`` to the nearest centre, ascending."""
    dist = radial_distance(lattice.sites, centers)
    mask = dist < radius
    if free_only:
        mask &= lattice.free
    return np.flatnonzero(mask)


def radial_distance(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest defect centre."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    return np.min(np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2), axis=1)
