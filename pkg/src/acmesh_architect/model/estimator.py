"""Gradient-norm error indicator η_T = ‖∇u_h‖_{L²(T)}."""

from dataclasses import dataclass

import numpy as np

from acmesh_architect.geometry.mesh import Region, TetMesh
from acmesh_architect.model.energy import displacement_gradients


@dataclass
class ErrorEstimate:
    eta: np.ndarray
    total: float
    coarse: float

    @property
    def max(self) -> float:
        return float(self.eta.max(initial=0.0))


def estimate_error(mesh: TetMesh, u: np.ndarray) -> ErrorEstimate:
    """
    Per-tet η_T = |∇u_h|_F·|T|^{1/2}, the global (Σ η_T²)^{1/2} and the same
    sum restricted to blend and continuum tets.
    """
    grads, volumes = displacement_gradients(mesh, np.asarray(u, dtype=float).reshape(-1, 3))
    eta = np.linalg.norm(grads, axis=(1, 2)) * np.sqrt(volumes)
    coarse = np.ones(mesh.n_tets, dtype=bool)
    if mesh.region is not None:
        coarse = mesh.region != Region.ATOMISTIC
    return ErrorEstimate(eta, float(np.sqrt(np.sum(eta**2))), float(np.sqrt(np.sum(eta[coarse] ** 2))))
