"""
Adaptive BGFC loop: solve, estimate, mark, refine/extend, transfer, repeat.
"""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np
from scipy.spatial import cKDTree

from acmesh_architect.core.builder import AcBuilder, CoupledProblem
from acmesh_architect.core.config import RunConfig, dump_config
from acmesh_architect.core.engine import AcEngine
from acmesh_architect.core.errors import AcMeshError, AdaptError, DriverError, ErrorCode
from acmesh_architect.geometry.adapt import refine_continuum
from acmesh_architect.geometry.continuum import init_boundary
from acmesh_architect.geometry.delaunay import triangulate
from acmesh_architect.geometry.extension import ExtensionRequest, extend_atomistic
from acmesh_architect.geometry.interp import transfer
from acmesh_architect.geometry.mesh import NodeFlag, Region, TetMesh, node_tolerance, quality_report, validate
from acmesh_architect.model.energy import (
    AtomisticModel,
    BgfcModel,
    BlendGeometry,
    CoupledState,
    displacement_gradients,
)
from acmesh_architect.model.estimator import ErrorEstimate, estimate_error
from acmesh_architect.model.lattice import Lattice, radial_distance
from acmesh_architect.model.optimize import minimize
from acmesh_architect.resources.constants import (
    CHECKPOINT_CONFIG,
    CHECKPOINT_MESH,
    CHECKPOINT_STATE,
    RUNLOG_JSONL,
    RUNLOG_TEXT,
)

# ==============================================================================
# MARKING
# ==============================================================================


@dataclass
class MarkResult:
    marked: np.ndarray
    split: np.ndarray
    interface: np.ndarray
    layers: int
    atom_marks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def dorfler_mark(eta: np.ndarray, tau: float) -> np.ndarray:
    """Smallest prefix of tets by descending η (ties by index) carrying a τ share of Σ η."""
    eta = np.asarray(eta, dtype=float)
    order = np.argsort(-eta, kind="stable")
    cumulative = np.cumsum(eta[order])
    k = int(np.searchsorted(cumulative, tau * cumulative[-1], side="left"))
    return order[: min(k, len(order) - 1) + 1]


def distance_layers(mesh: TetMesh, spacing: float, tets: np.ndarray | None = None) -> np.ndarray:
    """⌈dist(centroid, nearest ATOM node) / spacing⌉ per tet."""
    assert mesh.node_flags is not None
    atoms = np.flatnonzero(mesh.node_flags == NodeFlag.ATOM)
    if len(atoms) == 0:
        raise DriverError(ErrorCode.NO_ATOMISTIC_REGION, "the mesh has no ATOM nodes")
    tets = np.arange(mesh.n_tets) if tets is None else np.asarray(tets, dtype=np.int64)
    dist, _ = cKDTree(mesh.nodes[atoms]).query(mesh.centroids()[tets])
    return np.ceil(np.atleast_1d(dist) / spacing).astype(np.int64)


def extension_sites(lattice: Lattice, blend: BlendGeometry, layers: int, spacing: float) -> np.ndarray:
    """Free sites in the shell [R + L, R + L + layers·spacing) around the defect centres."""
    r = radial_distance(lattice.sites, blend.centers)
    inner = blend.outer_radius
    mask = lattice.free & (r >= inner) & (r < inner + layers * spacing)
    return np.flatnonzero(mask)


def mark_elements(
    eta: np.ndarray,
    mesh: TetMesh,
    tau1: float,
    tau2: float,
    max_layers: int,
    spacing: float,
    lattice: Lattice | None = None,
    blend: BlendGeometry | None = None,
) -> MarkResult:
    """
    Bulk marking plus the interface rule: ℳ_p are the marked blend/continuum
    tets within p layers of the atoms, for the first p <= max_layers carrying
    τ₂ of the marked error. p = 0 means no extension this step.
    """
    assert mesh.region is not None
    eta = np.asarray(eta, dtype=float)
    if len(eta) != mesh.n_tets:
        raise DriverError(ErrorCode.BAD_PRECONDITION, f"expected {mesh.n_tets} indicators, got {len(eta)}")
    if len(eta) == 0 or not np.any(eta > 0):
        raise DriverError(ErrorCode.CONVERGED_OR_DEGENERATE, "all error indicators are zero")
    marked = dorfler_mark(eta, tau1)
    coarse = marked[mesh.region[marked] != Region.ATOMISTIC]
    layer = distance_layers(mesh, spacing, coarse)
    total = float(eta[marked].sum())
    p = 0
    interface = np.zeros(0, dtype=np.int64)
    for candidate in range(1, max_layers + 1):
        near = coarse[layer <= candidate]
        if float(eta[near].sum()) >= tau2 * total:
            p, interface = candidate, np.sort(near)
            break
    rest = np.setdiff1d(marked, interface)
    split = np.sort(rest[mesh.region[rest] == Region.CONTINUUM])
    atom_marks = np.zeros(0, dtype=np.int64)
    if p and lattice is not None and blend is not None:
        atom_marks = extension_sites(lattice, blend, p, spacing)
    return MarkResult(np.sort(marked), split, interface, p, atom_marks)


# ==============================================================================
# RUN LOG
# ==============================================================================


@dataclass
class StepRecord:
    step: int
    n_dof: int
    n_atoms: int
    n_nodes: int
    n_tets: int
    energy: float
    grad_norm: float
    iterations: int
    eta_total: float
    eta_coarse: float
    quality_histogram: list[int]
    fraction_high: float
    min_q: float
    r_atom: float
    l_blend: float
    layers: int = 0
    n_split: int = 0
    n_absorbed: int = 0
    geometry_error: float | None = None
    energy_error: float | None = None
    time_mesh: float = 0.0
    time_solve: float = 0.0
    time_estimate: float = 0.0
    time_refine: float = 0.0


TABLE_COLUMNS = (
    ("step", "step", 4, "d"),
    ("DoF", "n_dof", 8, "d"),
    ("atoms", "n_atoms", 6, "d"),
    ("energy", "energy", 14, ".6e"),
    ("eta", "eta_total", 11, ".4e"),
    ("geom.err", "geometry_error", 11, ".4e"),
    ("q>0.9", "fraction_high", 6, ".3f"),
    ("t_mesh", "time_mesh", 8, ".2f"),
    ("t_solve", "time_solve", 8, ".2f"),
    ("t_est", "time_estimate", 7, ".2f"),
    ("t_refine", "time_refine", 8, ".2f"),
)


class RunLog:
    """Per-step records, mirrored to a JSON-lines file and a text table when an output dir is set."""

    def __init__(self, output_dir: str | None = None) -> None:
        self.output_dir = output_dir
        self.records: list[StepRecord] = []
        if output_dir:
            for name in (RUNLOG_JSONL, RUNLOG_TEXT):
                path = os.path.join(output_dir, name)
                if os.path.exists(path):
                    os.remove(path)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: StepRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise DriverError(ErrorCode.BAD_PRECONDITION, f"step {record.step} after step {self.records[-1].step}")
        self.records.append(record)
        if self.output_dir:
            AcEngine.append_file(os.path.join(self.output_dir, RUNLOG_JSONL), json.dumps(asdict(record)))
            AcEngine.write_file(os.path.join(self.output_dir, RUNLOG_TEXT), self.table())

    def column(self, name: str) -> list[Any]:
        return [getattr(r, name) for r in self.records]

    def table(self) -> str:
        rows = [" ".join(f"{title:>{width}}" for title, _, width, _ in TABLE_COLUMNS)]
        for r in self.records:
            cells = []
            for _, key, width, spec in TABLE_COLUMNS:
                value = getattr(r, key)
                cells.append(f"{'-':>{width}}" if value is None else f"{value:>{width}{spec}}")
            rows.append(" ".join(cells))
        return "\n".join(rows)


# ==============================================================================
# REFERENCE ERRORS
# ==============================================================================


@dataclass
class ReferenceSolution:
    """Fully atomistic minimiser, interpolated on a mesh of the free sites and the domain boundary."""

    mesh: TetMesh
    u: np.ndarray
    energy: float
    site_u: np.ndarray


@dataclass
class ReferenceErrors:
    geometry: float
    energy: float


def reference_mesh(lattice: Lattice) -> TetMesh:
    surface = init_boundary(lattice.domain)
    free = lattice.sites[lattice.free]
    boundary = surface.nodes
    eps = node_tolerance(np.vstack([free, boundary]))
    if len(free):
        dist, _ = cKDTree(free).query(boundary)
        boundary = boundary[dist > eps]
    mesh = triangulate(np.vstack([free, boundary]))
    flags = np.concatenate(
        [np.full(len(free), NodeFlag.ATOM, dtype=np.int8), np.full(len(boundary), NodeFlag.DOMAIN_BOUNDARY, dtype=np.int8)]
    )
    ids = np.concatenate([np.flatnonzero(lattice.free), np.full(len(boundary), -1, dtype=np.int64)])
    return TetMesh(mesh.nodes, mesh.tets, None, flags, ids)


def reference_solution(problem: CoupledProblem) -> ReferenceSolution | None:
    """Pure atomistic solve for error reporting, skipped above the configured atom count."""
    lattice = problem.lattice
    n_free = int(lattice.free.sum())
    if n_free > problem.config.reference_max_atoms:
        logging.info(f"⚠️ Reference solve skipped: {n_free} atoms > {problem.config.reference_max_atoms}")
        return None
    model = AtomisticModel(lattice, problem.potential)
    adapt = problem.config.adapt
    result = minimize(model.energy, np.zeros(model.n_dof), adapt.g_tol, adapt.max_iter, adapt.lbfgs_memory)
    site_u = model.to_sites(result.x)
    mesh = reference_mesh(lattice)
    u = np.zeros((mesh.n_nodes, 3))
    n = int(lattice.free.sum())
    u[:n] = site_u[lattice.free]
    logging.info(f"✅ Reference atomistic solve: {n_free} atoms, E={result.energy:.8g}, {result.iterations} iterations")
    return ReferenceSolution(mesh, u, result.energy, site_u)


def compute_reference_errors(
    mesh: TetMesh, u: np.ndarray, energy: float, reference: ReferenceSolution
) -> ReferenceErrors:
    """‖∇u^a − ∇u_h‖_{L²} on the reference mesh and |ℰ(u^a) − ℰ^bgfc(u_h)|."""
    moved = transfer(mesh, np.asarray(u, dtype=float).reshape(-1, 3), reference.mesh)
    if moved.n_fallback:
        raise DriverError(
            ErrorCode.NO_COMMON_REFINEMENT,
            f"{moved.n_fallback} reference nodes lie outside the coupled mesh",
            {"nodes": moved.fallback[:10].tolist()},
        )
    grads, volumes = displacement_gradients(reference.mesh, reference.u - moved.values)
    geometry = float(np.sqrt(np.sum(np.sum(grads**2, axis=(1, 2)) * volumes)))
    return ReferenceErrors(geometry, abs(reference.energy - float(energy)))


# ==============================================================================
# ADAPTIVE LOOP
# ==============================================================================


@dataclass
class AdaptOutcome:
    mesh: TetMesh
    blend: BlendGeometry
    marks: MarkResult
    n_absorbed: int = 0
    remeshed: bool = False


def solve_state(problem: CoupledProblem, mesh: TetMesh, blend: BlendGeometry, u0: np.ndarray | None = None) -> CoupledState:
    """BGFC minimisation on one mesh, warm-started from nodal ``u0``."""
    model = BgfcModel.build(problem.lattice, problem.potential, mesh, blend)
    x0 = np.zeros(model.n_dof) if u0 is None else model.model.unknowns(u0)
    adapt = problem.config.adapt
    result = minimize(model.energy, x0, adapt.g_tol, adapt.max_iter, adapt.lbfgs_memory)
    state = CoupledState(mesh, model.model.nodal(result.x), blend, result.energy, result.grad_norm)
    state.extras["iterations"] = result.iterations
    state.extras["n_dof"] = model.n_dof
    return state


def adapt_step(problem: CoupledProblem, mesh: TetMesh, blend: BlendGeometry, eta: np.ndarray) -> AdaptOutcome:
    """Mark, split continuum tets, grow the atomistic region; falls back to a full remesh when the cavity fails."""
    cfg = problem.config
    spacing = problem.layer_spacing
    marks = mark_elements(
        eta, mesh, cfg.adapt.tau1, cfg.adapt.tau2, cfg.adapt.max_layers, spacing, problem.lattice, blend
    )
    refined = refine_continuum(mesh, marks.split, cfg.mesh.swap_factor, cfg.mesh.swap_max_sweeps)
    if not marks.layers or not len(marks.atom_marks):
        return AdaptOutcome(AcBuilder.tag_regions(refined, blend), blend, marks)

    grow_atoms = math.ceil(marks.layers / 2)
    grown = blend.grown(grow_atoms, marks.layers - grow_atoms, spacing)
    request = ExtensionRequest(problem.lattice.sites[marks.atom_marks], problem.lattice.site_ids[marks.atom_marks], marks.layers)
    remeshed = False
    try:
        extended = extend_atomistic(
            refined, request, cfg.mesh.c_r, cfg.mesh.smooth_rounds, cfg.mesh.smooth_band_hops, cfg.seed
        )
        new_mesh, absorbed = extended.mesh, len(extended.absorbed)
    except AdaptError as exc:
        if exc.code != ErrorCode.CAVITY_FAILED:
            raise
        logging.warning(f"⚠️ {exc}; regenerating the coupled mesh around the grown atomistic region")
        assert refined.node_flags is not None
        fem = refined.nodes[refined.node_flags == NodeFlag.FEM_NODE]
        new_mesh = AcBuilder.generate_mesh(replace(problem, blend=grown), interior_nodes=fem)
        absorbed, remeshed = len(marks.atom_marks), True
    return AdaptOutcome(AcBuilder.tag_regions(new_mesh, grown), grown, marks, absorbed, remeshed)


@dataclass
class AdaptiveResult:
    runlog: RunLog
    state: CoupledState
    problem: CoupledProblem
    reference: ReferenceSolution | None = None


def write_checkpoint(output_dir: str, state: CoupledState, step: int, estimate: ErrorEstimate | None = None) -> None:
    AcEngine.write_mesh(os.path.join(output_dir, CHECKPOINT_MESH), state.mesh)
    AcEngine.save_state(
        os.path.join(output_dir, CHECKPOINT_STATE),
        u=state.u,
        beta=state.beta,
        centers=state.blend.centers,
        r_atom=state.blend.r_atom,
        l_blend=state.blend.l_blend,
        step=step,
        energy=state.energy,
    )
    cell_data = {"q": quality_report(state.mesh).per_tet_q}
    if estimate is not None:
        cell_data["eta"] = estimate.eta
    AcEngine.write_vtk(
        os.path.join(output_dir, f"step_{step:02d}.vtk"),
        state.mesh,
        point_data={"u": state.u, "beta": state.beta},
        cell_data=cell_data,
    )


def adaptive_solve(
    cfg: RunConfig,
    output_dir: str | None = None,
    problem: CoupledProblem | None = None,
    with_reference: bool = True,
) -> AdaptiveResult:
    """Run the solve → estimate → mark → adapt loop for ``cfg.adapt.max_steps`` adaptations."""
    problem = problem or AcBuilder.setup_problem(cfg)
    runlog = RunLog(output_dir)
    if output_dir:
        AcEngine.write_file(os.path.join(output_dir, CHECKPOINT_CONFIG), dump_config(cfg))
    reference = reference_solution(problem) if with_reference else None

    t0 = time.perf_counter()
    mesh = AcBuilder.generate_mesh(problem)
    time_mesh = time.perf_counter() - t0
    blend = problem.blend
    u0: np.ndarray | None = None
    state: CoupledState | None = None
    last_adapt: AdaptOutcome | None = None

    for step in range(cfg.adapt.max_steps + 1):
        try:
            t0 = time.perf_counter()
            state = solve_state(problem, mesh, blend, u0)
            time_solve = time.perf_counter() - t0
            t0 = time.perf_counter()
            estimate = estimate_error(mesh, state.u)
            time_estimate = time.perf_counter() - t0
        except AcMeshError as exc:
            logging.error(f"❌ Step {step} failed: {exc}")
            raise

        quality = quality_report(mesh)
        errors = compute_reference_errors(mesh, state.u, state.energy, reference) if reference else None
        record = StepRecord(
            step=step,
            n_dof=int(state.extras["n_dof"]),
            n_atoms=int(np.count_nonzero(mesh.node_flags == NodeFlag.ATOM)),
            n_nodes=mesh.n_nodes,
            n_tets=mesh.n_tets,
            energy=state.energy,
            grad_norm=state.grad_norm,
            iterations=int(state.extras["iterations"]),
            eta_total=estimate.total,
            eta_coarse=estimate.coarse,
            quality_histogram=[int(v) for v in quality.histogram],
            fraction_high=quality.fraction_high,
            min_q=quality.min_q,
            r_atom=blend.r_atom,
            l_blend=blend.l_blend,
            layers=last_adapt.marks.layers if last_adapt else 0,
            n_split=len(last_adapt.marks.split) if last_adapt else 0,
            n_absorbed=last_adapt.n_absorbed if last_adapt else 0,
            geometry_error=errors.geometry if errors else None,
            energy_error=errors.energy if errors else None,
            time_mesh=time_mesh,
            time_solve=time_solve,
            time_estimate=time_estimate,
        )
        if output_dir:
            write_checkpoint(output_dir, state, step, estimate)

        if step == cfg.adapt.max_steps or record.n_dof >= cfg.adapt.dof_budget:
            runlog.append(record)
            break
        try:
            t0 = time.perf_counter()
            last_adapt = adapt_step(problem, mesh, blend, estimate.eta)
            record.time_refine = time.perf_counter() - t0
        except DriverError as exc:
            runlog.append(record)
            if exc.code == ErrorCode.CONVERGED_OR_DEGENERATE:
                logging.info(f"✅ Converged at step {step}: {exc}")
                break
            raise
        except AcMeshError as exc:
            runlog.append(record)
            logging.error(f"❌ Adaptation after step {step} failed, last good state kept: {exc}")
            raise
        runlog.append(record)

        t0 = time.perf_counter()
        validate(last_adapt.mesh).raise_if_invalid("adapted mesh")
        u0 = transfer(mesh, state.u, last_adapt.mesh).values
        mesh, blend = last_adapt.mesh, last_adapt.blend
        time_mesh = time.perf_counter() - t0
        logging.info(
            f"✨ Step {step}: η={estimate.total:.4e}, DoF={record.n_dof}, p={last_adapt.marks.layers}, "
            f"{len(last_adapt.marks.split)} split, {last_adapt.n_absorbed} atoms absorbed"
        )

    assert state is not None
    logging.info(f"✅ Adaptive run finished after {len(runlog)} solves")
    return AdaptiveResult(runlog, state, problem, reference)


def load_checkpoint(directory: str) -> tuple[TetMesh, np.ndarray, BlendGeometry, int]:
    """Mesh, nodal u, blend geometry and step index of the last checkpoint in ``directory``."""
    mesh = AcEngine.read_mesh(os.path.join(directory, CHECKPOINT_MESH))
    data = AcEngine.load_state(os.path.join(directory, CHECKPOINT_STATE))
    if len(data["u"]) != mesh.n_nodes:
        raise DriverError(
            ErrorCode.BAD_PRECONDITION,
            f"checkpoint state has {len(data['u'])} nodal values for {mesh.n_nodes} nodes",
        )
    blend = BlendGeometry(data["centers"], float(data["r_atom"]), float(data["l_blend"]))
    return mesh, data["u"], blend, int(data["step"])


def resume_step(cfg: RunConfig, directory: str, output_dir: str | None = None) -> CoupledState:
    """
    One adaptation from a checkpoint: estimate on the stored solution, adapt,
    then re-solve warm-started. The new state is checkpointed as the next step.
    """
    problem = AcBuilder.setup_problem(cfg)
    mesh, u, blend, step = load_checkpoint(directory)
    estimate = estimate_error(mesh, u)
    outcome = adapt_step(problem, mesh, blend, estimate.eta)
    validate(outcome.mesh).raise_if_invalid("adapted mesh")
    u0 = transfer(mesh, u, outcome.mesh).values
    state = solve_state(problem, outcome.mesh, outcome.blend, u0)
    target = output_dir or directory
    write_checkpoint(target, state, step + 1, estimate_error(state.mesh, state.u))
    logging.info(
        f"✅ Step {step + 1}: DoF={state.extras['n_dof']}, E={state.energy:.8g}, "
        f"p={outcome.marks.layers}, {len(outcome.marks.split)} split"
    )
    return state
