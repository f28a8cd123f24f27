import logging
from dataclasses import dataclass

import numpy as np

from acmesh_architect.core.config import RunConfig
from acmesh_architect.core.engine import AtomSet
from acmesh_architect.core.errors import ErrorCode, MeshError
from acmesh_architect.geometry.atomistic import build_atomistic_mesh
from acmesh_architect.geometry.continuum import ATOM_REGIONS, DomainSpec, build_continuum
from acmesh_architect.geometry.mesh import NodeFlag, Region, TetMesh, validate
from acmesh_architect.model.energy import BlendGeometry
from acmesh_architect.model.lattice import Lattice, Void, build_lattice, radial_distance, sites_within
from acmesh_architect.model.potentials import SitePotential
from acmesh_architect.plugins.manager import PluginManager


@dataclass
class CoupledProblem:
    """Everything a coupled solve needs besides the mesh."""

    config: RunConfig
    lattice: Lattice
    potential: SitePotential
    domain: DomainSpec
    blend: BlendGeometry

    @property
    def layer_spacing(self) -> float:
        spacing = self.config.adapt.layer_spacing
        return float(spacing) if spacing else self.lattice.nn_distance


class AcBuilder:
    """
    Turns a run configuration into a lattice, a potential and a coupled
    atomistic/continuum mesh. All methods are static.
    """

    @staticmethod
    def setup_problem(cfg: RunConfig) -> CoupledProblem:
        a = float(cfg.lattice.a)
        d = cfg.domain
        center = tuple(a * np.asarray(d.center, dtype=float))
        extent = tuple(a * np.atleast_1d(np.asarray(d.extent_cells, dtype=float)))
        domain = DomainSpec(d.shape, center, extent, a * d.boundary_spacing_cells, d.grading)  # type: ignore[arg-type]
        voids = [Void(a * np.asarray(v["center"], dtype=float), a * float(v["radius_cells"])) for v in cfg.lattice.voids]
        lattice = build_lattice(cfg.lattice.structure.upper(), a, domain, voids, cfg.lattice.r_cut_cells)
        params = dict(cfg.potential.params)
        params.setdefault("r_cut", lattice.r_cut)
        potential = PluginManager.build_potential(cfg.potential.kind, params)
        centers = np.array([v.center for v in voids]) if voids else np.asarray(domain.center).reshape(1, 3)
        blend = BlendGeometry(centers, a * cfg.coupling.r_atom_cells, a * cfg.coupling.l_blend_cells)
        logging.info(
            f"🧱 Problem '{cfg.name}': {lattice.structure.value} a={a:g}, {int(lattice.free.sum())} free sites, "
            f"{len(voids)} voids, potential {potential.kind}"
        )
        return CoupledProblem(cfg, lattice, potential, domain, blend)

    @staticmethod
    def atom_sites(lattice: Lattice, blend: BlendGeometry) -> np.ndarray:
        """Free lattice sites within the atomistic + blend radius, by site id."""
        return sites_within(lattice, blend.centers, blend.outer_radius)

    @staticmethod
    def tag_regions(mesh: TetMesh, blend: BlendGeometry) -> TetMesh:
        """Atom tets become ATOMISTIC when their centroid lies within the core radius, BLEND otherwise."""
        assert mesh.region is not None
        out = mesh.copy()
        atom = np.isin(out.region, [int(r) for r in ATOM_REGIONS])
        core = radial_distance(out.centroids(), blend.centers) <= blend.r_atom
        out.region[atom & core] = Region.ATOMISTIC
        out.region[atom & ~core] = Region.BLEND
        return out

    @staticmethod
    def mesh_atoms(
        positions: np.ndarray,
        site_ids: np.ndarray,
        domain: DomainSpec,
        cfg: RunConfig,
        interior_nodes: np.ndarray | None = None,
    ) -> TetMesh:
        """Canonical atomistic mesh of the atoms, continuum mesh out to the domain boundary, fused."""
        if len(positions) < 4:
            raise MeshError(ErrorCode.TOO_FEW_ATOMS, f"need at least 4 atoms, got {len(positions)}")
        atomistic = build_atomistic_mesh(positions, site_ids, c_r=cfg.mesh.c_r, seed=cfg.seed)
        mesh = build_continuum(
            atomistic.mesh,
            domain,
            interior_nodes,
            q_min=cfg.mesh.q_min,
            node_budget=cfg.mesh.node_budget,
            swap_factor=cfg.mesh.swap_factor,
            seed=cfg.seed,
        )
        validate(mesh).raise_if_invalid("generated mesh")
        return mesh

    @staticmethod
    def generate_mesh(problem: CoupledProblem, interior_nodes: np.ndarray | None = None) -> TetMesh:
        idx = AcBuilder.atom_sites(problem.lattice, problem.blend)
        mesh = AcBuilder.mesh_atoms(
            problem.lattice.sites[idx], problem.lattice.site_ids[idx], problem.domain, problem.config, interior_nodes
        )
        mesh = AcBuilder.tag_regions(mesh, problem.blend)
        n_atoms = int(np.count_nonzero(mesh.node_flags == NodeFlag.ATOM))
        logging.info(f"✅ Coupled mesh: {mesh.n_nodes} nodes ({n_atoms} atoms), {mesh.n_tets} tets")
        return mesh

    @staticmethod
    def mesh_point_cloud(atoms: AtomSet, domain: DomainSpec, cfg: RunConfig) -> TetMesh:
        """Coupled mesh of an arbitrary atom cloud; atom tets stay ATOMISTIC."""
        inside = domain.depth(atoms.positions) > 0
        if not np.all(inside):
            raise MeshError(
                ErrorCode.BAD_PRECONDITION,
                f"{int((~inside).sum())} atoms lie outside the domain",
                {"atoms": np.flatnonzero(~inside)[:10].tolist()},
            )
        ids = np.arange(len(atoms), dtype=np.int64)
        return AcBuilder.mesh_atoms(atoms.positions, ids, domain, cfg)
