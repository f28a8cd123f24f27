"""
Energy-difference functionals: pure atomistic, blended quasi-continuum
(BQCE) and its ghost-force-corrected variant (BGFC).

Unknowns are flattened displacement vectors over the free degrees of
freedom (lattice sites for the atomistic model, mesh nodes strictly inside
the domain for the coupled models). Lattice sites that are not unknowns take
their displacement through a fixed sparse linear map: identity for sites
that coincide with a mesh node, the P1 interpolant inside the mesh, zero
outside the domain.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from acmesh_architect.core.errors import ErrorCode, ModelError
from acmesh_architect.geometry.interp import build_aabbtree, locate
from acmesh_architect.geometry.mesh import NodeFlag, TetMesh, node_tolerance
from acmesh_architect.model.lattice import BOUNDARY_EPS_REL, Lattice, radial_distance
from acmesh_architect.model.potentials import SitePotential, warn_short_bonds

DEGENERATE_REL = 1e-12


# ==============================================================================
# BLENDING
# ==============================================================================


def blend_profile(t: np.ndarray) -> np.ndarray:
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def blend_function(x: np.ndarray, r_atom: float, l_blend: float, centers: np.ndarray | None = None) -> np.ndarray:
    """β(x): 0 within ``r_atom`` of the nearest centre, 1 beyond ``r_atom + l_blend``, quintic between."""
    if not l_blend > 0:
        raise ModelError(ErrorCode.BAD_PRECONDITION, f"blend width must be positive, got {l_blend}")
    centers = np.zeros((1, 3)) if centers is None else centers
    return blend_profile((radial_distance(x, centers) - r_atom) / l_blend)


@dataclass
class BlendGeometry:
    """Radial atomistic core and blend annulus around the defect centres."""

    centers: np.ndarray
    r_atom: float
    l_blend: float

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        self.r_atom = float(self.r_atom)
        self.l_blend = float(self.l_blend)

    @property
    def outer_radius(self) -> float:
        return self.r_atom + self.l_blend

    def beta(self, x: np.ndarray) -> np.ndarray:
        return blend_function(x, self.r_atom, self.l_blend, self.centers)

    def grown(self, atom_layers: int, blend_layers: int, spacing: float) -> "BlendGeometry":
        return BlendGeometry(self.centers, self.r_atom + atom_layers * spacing, self.l_blend + blend_layers * spacing)

    def as_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "r_atom": self.r_atom, "l_blend": self.l_blend}


# ==============================================================================
# ATOMISTIC SITE SUM
# ==============================================================================


class BondSum:
    """
    Σ_ℓ w_ℓ (V_ℓ(Du) − V_ℓ(0)) over a fixed set of weighted energy sites,
    with site displacements ``transfer @ U``.
    """

    def __init__(
        self,
        potential: SitePotential,
        lattice: Lattice,
        energy_sites: np.ndarray,
        weights: np.ndarray,
    ) -> None:
        if potential.r_cut > lattice.r_cut * (1 + 1e-12):
            raise ModelError(
                ErrorCode.BAD_PRECONDITION,
                f"potential cutoff {potential.r_cut:.4g} exceeds the lattice neighbour cutoff {lattice.r_cut:.4g}",
            )
        self.potential = potential
        energy_sites = np.asarray(energy_sites, dtype=np.int64)
        lists = lattice.tree.query_ball_point(lattice.sites[energy_sites], lattice.r_cut) if len(energy_sites) else []
        site_of: list[int] = []
        nbr_of: list[int] = []
        for k, (s, nbrs) in enumerate(zip(energy_sites.tolist(), lists)):
            for j in sorted(nbrs):
                if j != s:
                    site_of.append(k)
                    nbr_of.append(j)
        others = np.setdiff1d(np.asarray(nbr_of, dtype=np.int64), energy_sites)
        self.local_sites = np.concatenate([energy_sites, others])
        position = {int(s): i for i, s in enumerate(self.local_sites.tolist())}
        self.bond_site = np.asarray(site_of, dtype=np.int64)
        self.bond_nbr = np.asarray([position[j] for j in nbr_of], dtype=np.int64)
        self.n_energy = len(energy_sites)
        self.weights = np.asarray(weights, dtype=float)
        coords = lattice.sites[self.local_sites]
        self.r0 = coords[self.bond_nbr] - coords[self.bond_site]
        self.e0 = potential.site_energies(self.bond_site, self.r0, self.n_energy).energy
        self.transfer: sparse.csr_matrix = sparse.csr_matrix((len(self.local_sites), 0))

    @property
    def n_bonds(self) -> int:
        return len(self.bond_site)

    def evaluate(self, unknowns: np.ndarray) -> tuple[float, np.ndarray, int]:
        u_local = np.asarray(self.transfer @ unknowns)
        vectors = self.r0 + u_local[self.bond_nbr] - u_local[self.bond_site]
        out = self.potential.site_energies(self.bond_site, vectors, self.n_energy)
        energy = float(np.dot(self.weights, out.energy - self.e0))
        weighted = self.weights[self.bond_site][:, None] * out.bond_gradient
        grad_local = np.zeros_like(u_local)
        np.add.at(grad_local, self.bond_nbr, weighted)
        np.add.at(grad_local, self.bond_site, -weighted)
        return energy, np.asarray(self.transfer.T @ grad_local), out.short_bonds


class AtomisticModel:
    """The full atomistic energy-difference functional ℰ with the free sites as unknowns."""

    def __init__(self, lattice: Lattice, potential: SitePotential) -> None:
        self.lattice = lattice
        self.free_sites = np.flatnonzero(lattice.free)
        touched = np.zeros(lattice.n_sites, dtype=bool)
        touched[self.free_sites] = True
        pairs = lattice.neighbor_pairs()
        if len(pairs):
            touched[pairs[lattice.free[pairs[:, 0]], 1]] = True
            touched[pairs[lattice.free[pairs[:, 1]], 0]] = True
        energy_sites = np.flatnonzero(touched)
        self.bonds = BondSum(potential, lattice, energy_sites, np.ones(len(energy_sites)))
        column = np.full(lattice.n_sites, -1, dtype=np.int64)
        column[self.free_sites] = np.arange(len(self.free_sites))
        cols = column[self.bonds.local_sites]
        rows = np.flatnonzero(cols >= 0)
        self.bonds.transfer = sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols[rows])), shape=(len(self.bonds.local_sites), len(self.free_sites))
        )

    @property
    def n_dof(self) -> int:
        return 3 * len(self.free_sites)

    def energy(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        e, grad, short = self.bonds.evaluate(np.asarray(x, dtype=float).reshape(-1, 3))
        warn_short_bonds(short, "the atomistic model")
        return e, grad.ravel()

    def to_sites(self, x: np.ndarray) -> np.ndarray:
        u = np.zeros((self.lattice.n_sites, 3))
        u[self.free_sites] = np.asarray(x, dtype=float).reshape(-1, 3)
        return u

    def from_sites(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float).reshape(-1, 3)[self.free_sites].ravel()


def atomistic_energy(lattice: Lattice, potential: SitePotential, u: np.ndarray) -> tuple[float, np.ndarray]:
    """ℰ(u) and its gradient per site (zero on clamped sites) for site displacements ``u``."""
    model = AtomisticModel(lattice, potential)
    e, g = model.energy(model.from_sites(u))
    return e, model.to_sites(g)


# ==============================================================================
# CAUCHY-BORN
# ==============================================================================


def cauchy_born_density(
    deformation: np.ndarray, potential: SitePotential, stencil: np.ndarray, site_volume: float
) -> tuple[np.ndarray, np.ndarray]:
    """W(𝖥) = V(𝖥ℛ)/|det 𝗔| and ∂W/∂𝖥 for a (T, 3, 3) batch of deformation gradients."""
    deformation = np.asarray(deformation, dtype=float).reshape(-1, 3, 3)
    det = np.linalg.det(deformation)
    bad = np.flatnonzero(det <= 0)
    if len(bad):
        raise ModelError(
            ErrorCode.INVERTED_DEFORMATION,
            f"det F <= 0 in {len(bad)} elements",
            {"elements": bad[:10].tolist(), "det": float(det[bad[0]])},
        )
    n, m = len(deformation), len(stencil)
    vectors = np.einsum("tij,rj->tri", deformation, stencil).reshape(-1, 3)
    owner = np.repeat(np.arange(n), m)
    out = potential.site_energies(owner, vectors, n)
    dw = np.einsum("tri,rj->tij", out.bond_gradient.reshape(n, m, 3), stencil)
    return out.energy / site_volume, dw / site_volume


def cauchy_born_W(
    deformation: np.ndarray, potential: SitePotential, stencil: np.ndarray, site_volume: float
) -> tuple[float, np.ndarray]:
    w, dw = cauchy_born_density(deformation, potential, stencil, site_volume)
    return float(w[0]), dw[0]


def shape_gradients(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Volumes (T,) and P1 basis gradients (T, 4, 3) of a (T, 4, 3) batch of tets."""
    edges = points[:, 1:] - points[:, :1]
    det = np.linalg.det(edges)
    scale = np.max(np.linalg.norm(edges, axis=2), axis=1) ** 3
    bad = np.flatnonzero(np.abs(det) <= DEGENERATE_REL * scale)
    if len(bad):
        raise ModelError(
            ErrorCode.DEGENERATE_ELEMENT, f"{len(bad)} degenerate elements in quadrature", {"elements": bad[:10].tolist()}
        )
    inv = np.linalg.inv(edges)
    grads = np.empty_like(points)
    grads[:, 1:] = np.transpose(inv, (0, 2, 1))
    grads[:, 0] = -grads[:, 1:].sum(axis=1)
    return np.abs(det) / 6.0, grads


def displacement_gradients(mesh: TetMesh, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Constant ∇u per tet (T, 3, 3) with (∇u)_ij = ∂u_i/∂x_j, and tet volumes."""
    volumes, grads = shape_gradients(mesh.tet_points())
    return np.einsum("tki,tkj->tij", np.asarray(u)[mesh.tets], grads), volumes


# ==============================================================================
# COUPLED MODELS
# ==============================================================================


def mesh_fingerprint(mesh: TetMesh, blend: BlendGeometry) -> str:
    digest = hashlib.sha1()
    digest.update(np.ascontiguousarray(mesh.nodes).tobytes())
    digest.update(np.ascontiguousarray(mesh.tets).tobytes())
    digest.update(np.ascontiguousarray(blend.centers).tobytes())
    digest.update(np.asarray([blend.r_atom, blend.l_blend]).tobytes())
    return digest.hexdigest()


def free_node_mask(mesh: TetMesh, lattice: Lattice) -> np.ndarray:
    """Mesh nodes carrying unknowns: everything except domain-boundary nodes."""
    free = lattice.domain.depth(mesh.nodes) > BOUNDARY_EPS_REL * lattice.a
    if mesh.node_flags is not None:
        free &= mesh.node_flags != NodeFlag.DOMAIN_BOUNDARY
    return free


def site_transfer(lattice: Lattice, mesh: TetMesh, sites: np.ndarray) -> tuple[sparse.csr_matrix, int]:
    """
    Sparse map from nodal displacements to the displacements of ``sites``:
    identity on coincident nodes, P1 inside the mesh, zero elsewhere.
    Returns the map and the number of in-domain sites that could not be located.
    """
    coords = lattice.sites[sites]
    tree = cKDTree(mesh.nodes)
    dist, nearest = tree.query(coords)
    eps = node_tolerance(mesh.nodes)
    inside = lattice.domain.depth(coords) > BOUNDARY_EPS_REL * lattice.a
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    missing = 0
    aabb = None
    for i in range(len(sites)):
        if dist[i] <= eps:
            rows.append(i)
            cols.append(int(nearest[i]))
            vals.append(1.0)
            continue
        if not inside[i]:
            continue
        if aabb is None:
            aabb = build_aabbtree(mesh)
        hit = locate(aabb, coords[i])
        if hit is None:
            missing += 1
            continue
        t, w = hit
        for node, weight in zip(mesh.tets[t].tolist(), w.tolist()):
            if weight != 0.0:
                rows.append(i)
                cols.append(node)
                vals.append(weight)
    matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(len(sites), mesh.n_nodes))
    matrix.sum_duplicates()
    return matrix, missing


class CoupledModel:
    """
    BQCE energy on a coupled mesh: atomistic site energies weighted by 1 − β
    plus the midpoint-rule Cauchy–Born integral weighted by β.
    """

    def __init__(self, lattice: Lattice, potential: SitePotential, mesh: TetMesh, blend: BlendGeometry) -> None:
        self.lattice = lattice
        self.potential = potential
        self.mesh = mesh
        self.blend = blend
        self.fingerprint = mesh_fingerprint(mesh, blend)
        self.free_nodes = np.flatnonzero(free_node_mask(mesh, lattice))

        site_beta = blend.beta(lattice.sites)
        energy_sites = np.flatnonzero(site_beta < 1.0)
        self.bonds = BondSum(potential, lattice, energy_sites, 1.0 - site_beta[energy_sites])
        self.bonds.transfer, missing = site_transfer(lattice, mesh, self.bonds.local_sites)
        if missing:
            logging.warning(f"⚠️ {missing} in-domain lattice sites lie outside the coupled mesh; clamped to zero")

        tet_beta = blend.beta(mesh.centroids())
        self.cb_tets = np.flatnonzero(tet_beta > 0.0)
        volumes, self.cb_grads = shape_gradients(mesh.tet_points()[self.cb_tets])
        self.cb_weights = tet_beta[self.cb_tets] * volumes
        self.stencil = lattice.stencil
        self.site_volume = lattice.site_volume
        self.w0, _ = cauchy_born_W(np.eye(3), potential, self.stencil, self.site_volume)
        logging.debug(
            f"CoupledModel: {len(self.free_nodes)} free nodes, {self.bonds.n_energy} energy sites, "
            f"{self.bonds.n_bonds} bonds, {len(self.cb_tets)} Cauchy–Born tets"
        )

    @property
    def n_dof(self) -> int:
        return 3 * len(self.free_nodes)

    def nodal(self, x: np.ndarray) -> np.ndarray:
        u = np.zeros((self.mesh.n_nodes, 3))
        u[self.free_nodes] = np.asarray(x, dtype=float).reshape(-1, 3)
        return u

    def unknowns(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float).reshape(-1, 3)[self.free_nodes].ravel()

    def energy(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        u = self.nodal(x)
        e_atom, grad, short = self.bonds.evaluate(u)
        warn_short_bonds(short, "the blended atomistic sum")
        if len(self.cb_tets):
            du = np.einsum("tki,tkj->tij", u[self.mesh.tets[self.cb_tets]], self.cb_grads)
            w, dw = cauchy_born_density(np.eye(3) + du, self.potential, self.stencil, self.site_volume)
            e_cb = float(np.dot(self.cb_weights, w - self.w0))
            nodal = np.einsum("t,tij,tkj->tki", self.cb_weights, dw, self.cb_grads)
            np.add.at(grad, self.mesh.tets[self.cb_tets], nodal)
        else:
            e_cb = 0.0
        return e_atom + e_cb, grad[self.free_nodes].ravel()


def bqce_energy(model: CoupledModel, x: np.ndarray) -> tuple[float, np.ndarray]:
    return model.energy(x)


@dataclass
class GhostForceCorrection:
    """g = δℰ^bqce_hom(0) on the defect-free lattice, tied to one mesh and blend."""

    g: np.ndarray
    fingerprint: str


def ghost_force_correction(
    lattice: Lattice, potential: SitePotential, mesh: TetMesh, blend: BlendGeometry
) -> GhostForceCorrection:
    homogeneous = CoupledModel(lattice.homogeneous() if lattice.voids else lattice, potential, mesh, blend)
    _, g = homogeneous.energy(np.zeros(homogeneous.n_dof))
    logging.debug(f"ghost-force correction: ‖g‖∞ = {np.max(np.abs(g), initial=0.0):.3e}")
    return GhostForceCorrection(g, homogeneous.fingerprint)


@dataclass
class BgfcModel:
    """ℰ^bgfc(u) = ℰ^bqce(u) − ⟨g, u⟩."""

    model: CoupledModel
    correction: GhostForceCorrection

    @classmethod
    def build(cls, lattice: Lattice, potential: SitePotential, mesh: TetMesh, blend: BlendGeometry) -> "BgfcModel":
        return cls(CoupledModel(lattice, potential, mesh, blend), ghost_force_correction(lattice, potential, mesh, blend))

    @property
    def n_dof(self) -> int:
        return self.model.n_dof

    def energy(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        if self.correction.fingerprint != self.model.fingerprint or len(self.correction.g) != self.model.n_dof:
            raise ModelError(
                ErrorCode.STALE_CORRECTION,
                "ghost-force correction was computed for a different mesh or blend",
                {"expected": self.model.fingerprint, "found": self.correction.fingerprint},
            )
        x = np.asarray(x, dtype=float)
        e, grad = self.model.energy(x)
        return e - float(np.dot(self.correction.g, x)), grad - self.correction.g


def bgfc_energy(model: BgfcModel, x: np.ndarray) -> tuple[float, np.ndarray]:
    return model.energy(x)


@dataclass
class CoupledState:
    """A coupled mesh with its nodal displacement, blend and last energy."""

    mesh: TetMesh
    u: np.ndarray
    blend: BlendGeometry
    energy: float = 0.0
    grad_norm: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def beta(self) -> np.ndarray:
        return self.blend.beta(self.mesh.nodes)

    def n_dof(self, lattice: Lattice) -> int:
        return 3 * int(np.count_nonzero(free_node_mask(self.mesh, lattice)))
