"""
Limited-memory BFGS with a strong-Wolfe line search for the energy
functionals. The two-loop recursion follows the usual molecular-statics
formulation; scipy supplies the Wolfe search and a plain Armijo backtrack
takes over when it cannot bracket a step.
"""

import logging
import warnings
from collections import deque
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search

from acmesh_architect.core.errors import ErrorCode, ModelError
from acmesh_architect.resources.constants import G_TOL, LBFGS_MEMORY, MAX_ITER

EnergyFunction = Callable[[np.ndarray], tuple[float, np.ndarray]]

WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9
MAX_STEP = 0.5
BACKTRACK_STEPS = 40
CURVATURE_EPS = 1e-12


@dataclass
class OptimizeResult:
    x: np.ndarray
    energy: float
    grad_norm: float
    iterations: int
    n_evals: int
    converged: bool
    energies: list[float] = field(default_factory=list)


class _Evaluator:
    """Caches the last evaluation; inverted trial configurations score +inf."""

    def __init__(self, fun: EnergyFunction) -> None:
        self.fun = fun
        self.n_evals = 0
        self._x: np.ndarray | None = None
        self._value: tuple[float, np.ndarray] = (np.inf, np.zeros(0))

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        if self._x is not None and np.array_equal(x, self._x):
            return self._value
        self.n_evals += 1
        try:
            f, g = self.fun(x)
        except ModelError as exc:
            if exc.code not in (ErrorCode.INVERTED_DEFORMATION, ErrorCode.DEGENERATE_ELEMENT):
                raise
            f, g = np.inf, np.full_like(x, np.nan)
        self._x = np.array(x, copy=True)
        self._value = (float(f), np.asarray(g, dtype=float))
        return self._value

    def f(self, x: np.ndarray) -> float:
        return self(x)[0]

    def g(self, x: np.ndarray) -> np.ndarray:
        return self(x)[1]


def two_loop(g: np.ndarray, s_hist: deque, y_hist: deque) -> np.ndarray:
    """H·g for the L-BFGS inverse Hessian approximation."""
    q = g.copy()
    alphas = []
    rhos = [1.0 / float(np.dot(y, s)) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in reversed(list(zip(s_hist, y_hist, rhos))):
        a = rho * float(np.dot(s, q))
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(np.dot(s, y)) / float(np.dot(y, y))
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * float(np.dot(y, q))
        q += (a - b) * s
    return q


def _backtrack(ev: _Evaluator, x: np.ndarray, f: float, g: np.ndarray, d: np.ndarray) -> float | None:
    slope = float(np.dot(g, d))
    alpha = 1.0
    for _ in range(BACKTRACK_STEPS):
        trial = ev.f(x + alpha * d)
        if np.isfinite(trial) and trial <= f + WOLFE_C1 * alpha * slope:
            return alpha
        alpha *= 0.5
    return None


def _step(ev: _Evaluator, x: np.ndarray, f: float, g: np.ndarray, d: np.ndarray, f_prev: float | None) -> float | None:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            alpha = line_search(ev.f, ev.g, x, d, gfk=g, old_fval=f, old_old_fval=f_prev, c1=WOLFE_C1, c2=WOLFE_C2)[0]
        except (ValueError, FloatingPointError, ArithmeticError):
            alpha = None
    if alpha is not None and np.isfinite(ev.f(x + alpha * d)) and ev.f(x + alpha * d) <= f:
        return float(alpha)
    return _backtrack(ev, x, f, g, d)


def minimize(
    fun: EnergyFunction,
    x0: np.ndarray,
    g_tol: float = G_TOL,
    max_iter: int = MAX_ITER,
    memory: int = LBFGS_MEMORY,
    max_step: float = MAX_STEP,
) -> OptimizeResult:
    """
    Minimise ``fun`` from ``x0`` until ‖∇f‖∞ <= g_tol or ``max_iter`` steps.

    Accepted steps never increase the energy. Raises STALL when neither the
    quasi-Newton nor the steepest-descent direction admits a descent step.
    """
    ev = _Evaluator(fun)
    x = np.array(x0, dtype=float, copy=True)
    f, g = ev(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise ModelError(ErrorCode.BAD_PRECONDITION, "initial state has a non-finite energy or gradient")
    energies = [f]
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    f_prev: float | None = None
    gnorm = float(np.max(np.abs(g), initial=0.0))
    it = 0
    while gnorm > g_tol and it < max_iter:
        it += 1
        d = -two_loop(g, s_hist, y_hist)
        if not float(np.dot(g, d)) < 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        big = float(np.max(np.abs(d)))
        if big > max_step:
            d *= max_step / big
        alpha = _step(ev, x, f, g, d, f_prev)
        if alpha is None and s_hist:
            s_hist.clear()
            y_hist.clear()
            d = -g * min(1.0, max_step / gnorm)
            alpha = _step(ev, x, f, g, d, None)
        if alpha is None:
            raise ModelError(
                ErrorCode.STALL,
                f"line search failed at iteration {it}",
                {"iteration": it, "energy": f, "grad_norm": gnorm, "evaluations": ev.n_evals},
            )
        x_new = x + alpha * d
        f_new, g_new = ev(x_new)
        s, y = x_new - x, g_new - g
        if float(np.dot(s, y)) > CURVATURE_EPS * float(np.linalg.norm(s) * np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
        f_prev, x, f, g = f, x_new, f_new, g_new
        gnorm = float(np.max(np.abs(g)))
        energies.append(f)
        logging.debug(f"lbfgs {it}: E={f:.10g} |g|∞={gnorm:.3e} α={alpha:.3g}")

    converged = gnorm <= g_tol
    if not converged:
        logging.warning(f"⚠️ minimize stopped after {it} iterations with |g|∞={gnorm:.3e} > {g_tol:.1e}")
    return OptimizeResult(x, f, gnorm, it, ev.n_evals, converged, energies)

