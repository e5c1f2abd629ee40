"""Hyperparameter estimation: L-BFGS in log-parameter space.

The optimizer is a plain limited-memory BFGS (two-loop recursion) with a
strong-Wolfe line search. ``fit_hyperparams`` wires it to the negative log
marginal likelihood of the GPX model; ``default_init`` encodes the standard
initialization (unit scale, 0.1 noise levels, median-heuristic bandwidth).
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

__all__ = [
    "OptimizerConfig",
    "OptResult",
    "LineSearchStep",
    "OptimizationError",
    "lbfgs_minimize",
    "median_heuristic",
    "default_init",
    "fit_hyperparams",
    "NOISE_FLOOR",
]

logger = logging.getLogger(__name__)

# Lower bound on sigma_y^2 and sigma_w^2 during optimization.
NOISE_FLOOR = 1e-6


class OptimizationError(RuntimeError):
    """The objective became non-finite and the line search could not recover."""

    def __init__(self, message, last_x, last_f):
        super().__init__(message)
        self.last_x = np.array(last_x, copy=True)
        self.last_f = last_f


@dataclass(frozen=True)
class OptimizerConfig:
    memory: int = 10
    max_iters: int = 200
    grad_tol: float = 1e-6
    step_tol: float = 1e-10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_search: int = 25

    def __post_init__(self):
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.max_iters < 0 or self.max_line_search < 1:
            raise ValueError("max_iters must be >= 0 and max_line_search >= 1")
        if self.grad_tol < 0 or self.step_tol < 0:
            raise ValueError("tolerances must be nonnegative")


@dataclass(frozen=True)
class LineSearchStep:
    """One accepted step: enough to re-check the strong Wolfe conditions."""

    step_size: float
    f_before: float
    f_after: float
    slope_before: float
    slope_after: float


@dataclass
class OptResult:
    argmin: np.ndarray
    objective: float
    iterations: int
    converged_by: str  # "gradient" | "step" | "max_iters"
    grad: np.ndarray | None = None
    steps: list[LineSearchStep] = field(default_factory=list)


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _interpolate(a_lo, a_hi, f_lo, f_hi, d_lo, d_hi):
    """Cubic minimizer between two bracket ends; bisection when unsafe."""
    if not (np.isfinite(f_hi) and np.isfinite(d_hi)):
        return 0.5 * (a_lo + a_hi)
    d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    rad = d1 * d1 - d_lo * d_hi
    if rad < 0:
        return 0.5 * (a_lo + a_hi)
    d2 = np.sign(a_hi - a_lo) * np.sqrt(rad)
    denom = d_hi - d_lo + 2.0 * d2
    if denom == 0:
        return 0.5 * (a_lo + a_hi)
    a = a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / denom
    lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
    width = hi - lo
    # keep the trial away from the bracket ends
    if not (lo + 0.1 * width <= a <= hi - 0.1 * width):
        return 0.5 * (a_lo + a_hi)
    return a


def _strong_wolfe(fg, x, p, f0, g0, alpha1, cfg):
    """Nocedal & Wright line search (bracketing then zoom).

    Returns ``(alpha, f, g, nonfinite_seen)``; ``alpha`` is None on failure.
    """
    d0 = float(g0 @ p)
    c1, c2 = cfg.wolfe_c1, cfg.wolfe_c2
    budget = cfg.max_line_search
    nonfinite = False

    def evaluate(a):
        nonlocal budget, nonfinite
        budget -= 1
        f, g = fg(x + a * p)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            nonfinite = True
            return np.inf, None, np.nan
        return f, g, float(g @ p)

    def zoom(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi):
        while budget > 0:
            a = _interpolate(a_lo, a_hi, f_lo, f_hi, d_lo, d_hi)
            f, g, d = evaluate(a)
            if not np.isfinite(f) or f > f0 + c1 * a * d0 or f >= f_lo:
                a_hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, g
                if d * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, d_lo = a, f, d
            if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
                break
        return None, None, None

    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = alpha1
    first = True
    while budget > 0:
        f, g, d = evaluate(a)
        if not np.isfinite(f) or f > f0 + c1 * a * d0 or (not first and f >= f_prev):
            res = zoom(a_prev, f_prev, d_prev, a, f, d)
            return (*res, nonfinite)
        if abs(d) <= -c2 * d0:
            return a, f, g, nonfinite
        if d >= 0:
            res = zoom(a, f, d, a_prev, f_prev, d_prev)
            return (*res, nonfinite)
        a_prev, f_prev, d_prev = a, f, d
        a = 2.0 * a
        first = False
    return None, None, None, nonfinite


def lbfgs_minimize(objective, gradient, x0, cfg: OptimizerConfig | None = None) -> OptResult:
    """Minimize ``objective`` with L-BFGS and a strong-Wolfe line search.

    ``objective`` and ``gradient`` take a 1-d array. If they share work,
    pass the same callable returning ``(f, g)`` as ``objective`` and None
    as ``gradient``.

    Terminates when the max-norm of the gradient drops below ``grad_tol``,
    the accepted step is shorter than ``step_tol`` (or no acceptable step
    exists), or after ``max_iters`` iterations.
    """
    cfg = cfg or OptimizerConfig()
    if gradient is None:
        def fg(x):
            f, g = objective(x)
            return float(f), np.asarray(g, dtype=float)
    else:
        def fg(x):
            return float(objective(x)), np.asarray(gradient(x), dtype=float)

    x = np.array(x0, dtype=float)
    f, g = fg(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise OptimizationError("objective not finite at the starting point", x, f)

    pairs: deque = deque(maxlen=cfg.memory)
    steps: list[LineSearchStep] = []
    if np.max(np.abs(g), initial=0.0) < cfg.grad_tol:
        return OptResult(x, f, 0, "gradient", g, steps)

    it = 0
    converged_by = "max_iters"
    while it < cfg.max_iters:
        p = _two_loop(g, list(pairs))
        if not g @ p < 0:
            pairs.clear()
            p = -g
        for attempt in range(2):
            alpha1 = 1.0 if pairs else min(1.0, 1.0 / max(np.linalg.norm(p), 1e-300))
            a, f_new, g_new, nonfinite = _strong_wolfe(fg, x, p, f, g, alpha1, cfg)
            if a is not None or not pairs:
                break
            # retry once along steepest descent with a fresh memory
            pairs.clear()
            p = -g
        if a is None:
            if nonfinite:
                raise OptimizationError(
                    "line search exhausted after encountering non-finite objective values", x, f
                )
            converged_by = "step"
            break
        s = a * p
        yv = g_new - g
        steps.append(LineSearchStep(a, f, f_new, float(g @ p), float(g_new @ p)))
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            pairs.append((s, yv, 1.0 / sy))
        x = x + s
        f, g = f_new, g_new
        it += 1
        if np.max(np.abs(g)) < cfg.grad_tol:
            converged_by = "gradient"
            break
        if np.linalg.norm(s) < cfg.step_tol:
            converged_by = "step"
            break
    return OptResult(x, f, it, converged_by, g, steps)


def median_heuristic(X) -> float:
    """Median pairwise squared distance (lower-middle element for even counts).

    Squared distances are used because the kernel divides the squared
    distance by the bandwidth. Returns 1.0 (with a warning) if all points
    coincide.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("median heuristic needs at least two points")
    d2 = pdist(X, "sqeuclidean")
    k = (d2.size - 1) // 2
    med = float(np.partition(d2, k)[k])
    if not med > 0:
        warnings.warn("all pairwise distances are zero; bandwidth falls back to 1.0", RuntimeWarning)
        return 1.0
    return med


def default_init(data):
    """theta1 = 1, sigma_y = sigma_w = 0.1, theta2 from the median heuristic."""
    from .kernels import KernelParams
    from .model import Hyperparams

    return Hyperparams(KernelParams(1.0, median_heuristic(data.X)), sigma_y=0.1, sigma_w=0.1)


def fit_hyperparams(data, init, cfg: OptimizerConfig | None = None, restarts: int = 0, seed: int = 0,
                    return_result: bool = False):
    """Maximize the GPX log marginal likelihood over log-parameters.

    With ``restarts > 0`` additional runs start from the initial point
    perturbed log-uniformly by up to one decade per parameter; the run with
    the highest likelihood wins (ties go to the earliest run).
    """
    from .model import Hyperparams, lml_and_grad

    cfg = cfg or OptimizerConfig()
    floor = np.log(NOISE_FLOOR)

    def to_hyper(u):
        return Hyperparams.from_log(u, noise_floor=NOISE_FLOOR)

    def negobj(u):
        try:
            val, grad = lml_and_grad(to_hyper(u), data)
        except np.linalg.LinAlgError:
            return np.inf, np.full(4, np.nan)
        grad = grad.copy()
        # clamped noise parameters do not respond to their coordinate
        grad[2:][u[2:] < floor] = 0.0
        return -val, -grad

    u0 = init.to_log()
    u0[2:] = np.maximum(u0[2:], floor)
    starts = [u0]
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        starts.append(u0 + rng.uniform(-np.log(10.0), np.log(10.0), size=u0.size))

    best = None
    for i, u in enumerate(starts):
        try:
            res = lbfgs_minimize(negobj, None, u, cfg)
        except OptimizationError:
            if i == 0:
                raise
            logger.warning("restart %d diverged; skipped", i)
            continue
        logger.debug("run %d: -lml=%.6g iters=%d by=%s", i, res.objective, res.iterations, res.converged_by)
        if best is None or res.objective < best.objective:
            best = res
    if best.iterations == 0 and np.array_equal(best.argmin, u0):
        hyper = Hyperparams(init.kernel, max(init.sigma_y, NOISE_FLOOR**0.5), max(init.sigma_w, NOISE_FLOOR**0.5))
    else:
        hyper = to_hyper(best.argmin)
    return (hyper, best) if return_result else hyper
