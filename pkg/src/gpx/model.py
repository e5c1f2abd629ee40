"""The GPX model: marginal likelihood, predictive laws for targets and weights.

Each training sample has its own linear model ``y_i = w_i . z_i + noise``
whose weight vectors are tied together by independent GP priors (one per
simplified feature) over the original inputs ``x``. Integrating the weights
out gives a zero-mean Gaussian on ``y`` with covariance

    C = sigma_y^2 I + (K + sigma_w^2 I) * (Z Z^T)        (elementwise product)

so training costs the same as ordinary GP regression. The weight posterior
lives in an ``n*d``-dimensional space, but every quantity we need collapses
onto ``n x n`` solves against ``C``; see ``predict_w``.

A plain GP regressor (``gpr_*``) is included as the accuracy baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kernels import (
    CholFactor,
    KernelParams,
    chol_psd,
    chol_solve,
    cross_gram,
    gram_matrix,
    sq_dist,
)

__all__ = [
    "Hyperparams",
    "Dataset",
    "FittedGpx",
    "FittedGpr",
    "PredictiveScalar",
    "PredictiveWeights",
    "Explanation",
    "NumericalError",
    "FULL_COVARIANCE_MAX_D",
    "marginal_covariance",
    "log_marginal_likelihood",
    "lml_gradient",
    "lml_and_grad",
    "condition",
    "fit",
    "predict_y",
    "predict_y_batch",
    "predict_w",
    "predict_w_batch",
    "posterior_w_train",
    "explain",
    "explain_batch",
    "gpr_condition",
    "gpr_fit",
    "gpr_predict",
    "gpr_predict_batch",
    "gpr_log_marginal_likelihood",
]

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
# Above this many simplified features only marginal weight variances are kept.
FULL_COVARIANCE_MAX_D = 512
_NEG_VAR_TOL = 1e-8


class NumericalError(ArithmeticError):
    """A predictive variance came out negative beyond round-off."""


@dataclass(frozen=True)
class Hyperparams:
    kernel: KernelParams
    sigma_y: float
    sigma_w: float

    def __post_init__(self):
        # zero noise is allowed for fixed-parameter reductions; fitting keeps both above a floor
        for name in ("sigma_y", "sigma_w"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v!r}")

    @property
    def theta1(self) -> float:
        return self.kernel.theta1

    @property
    def theta2(self) -> float:
        return self.kernel.theta2

    def to_log(self) -> np.ndarray:
        """``(log theta1, log theta2, log sigma_y^2, log sigma_w^2)``."""
        with np.errstate(divide="ignore"):
            return np.log([self.theta1, self.theta2, self.sigma_y**2, self.sigma_w**2])

    @classmethod
    def from_log(cls, u, noise_floor: float = 0.0) -> "Hyperparams":
        u = np.asarray(u, dtype=float)
        vy = max(float(np.exp(u[2])), noise_floor)
        vw = max(float(np.exp(u[3])), noise_floor)
        return cls(KernelParams(float(np.exp(u[0])), float(np.exp(u[1]))), float(np.sqrt(vy)), float(np.sqrt(vw)))

    def as_dict(self) -> dict:
        return {"theta1": self.theta1, "theta2": self.theta2, "sigma_y": self.sigma_y, "sigma_w": self.sigma_w}

    @classmethod
    def from_dict(cls, d) -> "Hyperparams":
        return cls(KernelParams(float(d["theta1"]), float(d["theta2"])), float(d["sigma_y"]), float(d["sigma_w"]))


@dataclass(frozen=True)
class Dataset:
    """Original inputs ``X`` (n x m), simplified inputs ``Z`` (n x d), targets ``y``.

    Leaving ``Z`` out makes it an alias of ``X``.
    """

    X: np.ndarray
    Z: np.ndarray | None = None
    y: np.ndarray | None = None
    x_names: tuple | None = None
    z_names: tuple | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise ValueError("X must be 2-d")
        object.__setattr__(self, "X", X)
        if self.Z is None:
            object.__setattr__(self, "Z", X)
        else:
            Z = np.asarray(self.Z, dtype=float)
            if Z.ndim == 1:
                Z = Z[:, None]
            if Z.ndim != 2 or Z.shape[0] != X.shape[0]:
                raise ValueError(f"Z must be 2-d with {X.shape[0]} rows, got shape {Z.shape}")
            object.__setattr__(self, "Z", Z)
        n = X.shape[0]
        y = np.zeros(n) if self.y is None else np.asarray(self.y, dtype=float).reshape(-1)
        if y.shape[0] != n:
            raise ValueError(f"y has {y.shape[0]} entries, X has {n} rows")
        object.__setattr__(self, "y", y)
        for name, arr in (("X", X), ("Z", self.Z), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if self.x_names is None:
            object.__setattr__(self, "x_names", tuple(f"x{i}" for i in range(X.shape[1])))
        if self.z_names is None:
            names = self.x_names if self.z_is_x else tuple(f"z{i}" for i in range(self.Z.shape[1]))
            object.__setattr__(self, "z_names", tuple(names))

    @property
    def z_is_x(self) -> bool:
        return self.Z is self.X

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        X = self.X[idx]
        Z = None if self.z_is_x else self.Z[idx]
        return Dataset(X, Z, self.y[idx], self.x_names, self.z_names)

    def with_targets(self, y) -> "Dataset":
        return Dataset(self.X, None if self.z_is_x else self.Z, y, self.x_names, self.z_names)


@dataclass(frozen=True)
class PredictiveScalar:
    mean: float
    variance: float

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


@dataclass(frozen=True)
class PredictiveWeights:
    """Gaussian law of the weight vector at a test input.

    ``covariance`` is None when ``d`` exceeds ``FULL_COVARIANCE_MAX_D``;
    ``variance`` (its diagonal) is always present.
    """

    mean: np.ndarray
    covariance: np.ndarray | None
    variance: np.ndarray


@dataclass(frozen=True)
class Explanation:
    weights_mean: np.ndarray
    weights_std: np.ndarray
    contributions: np.ndarray
    prediction_mean: float
    prediction_std: float


@dataclass(frozen=True)
class FittedGpx:
    hyper: Hyperparams
    train: Dataset
    chol_C: CholFactor
    alpha: np.ndarray
    chol_M: CholFactor
    standardization: object = None
    info: dict = field(default_factory=dict, compare=False)

    @property
    def d(self) -> int:
        return self.train.d

    @property
    def m(self) -> int:
        return self.train.m


# ---------------------------------------------------------------------------
# marginal likelihood
# ---------------------------------------------------------------------------


def marginal_covariance(K, Z, sigma_y, sigma_w) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    n = K.shape[0]
    if K.shape != (n, n) or Z.shape[0] != n:
        raise ValueError(f"dimension mismatch: K {K.shape}, Z {Z.shape}")
    C = Z @ Z.T
    C *= K + sigma_w**2 * np.eye(n)
    C[np.diag_indices(n)] += sigma_y**2
    return 0.5 * (C + C.T)


def _covariance_parts(hyper, data, cache=None):
    if cache is not None and "D" in cache:
        D, ZZ = cache["D"], cache["ZZ"]
    else:
        D = sq_dist(data.X)
        ZZ = data.Z @ data.Z.T
        if cache is not None:
            cache["D"], cache["ZZ"] = D, ZZ
    K = np.exp(D * (-1.0 / hyper.theta2))
    K *= hyper.theta1
    return D, ZZ, K


def lml_and_grad(hyper: Hyperparams, data: Dataset, cache=None):
    """Log marginal likelihood and its gradient in log-parameter space.

    The gradient coordinates are ``(log theta1, log theta2, log sigma_y^2,
    log sigma_w^2)`` and use ``dL = 1/2 tr((a a^T - C^-1) dC)`` with
    ``a = C^-1 y``.
    """
    D, ZZ, K = _covariance_parts(hyper, data, cache)
    n = data.n
    KZ = K * ZZ
    C = KZ.copy()
    vw, vy = hyper.sigma_w**2, hyper.sigma_y**2
    zz_diag = np.diag(ZZ).copy()
    C[np.diag_indices(n)] += vw * zz_diag + vy
    fac = chol_psd(C)
    del C
    alpha = chol_solve(fac, data.y)
    lml = -0.5 * float(data.y @ alpha) - 0.5 * fac.logdet() - 0.5 * n * LOG_2PI

    W = chol_solve(fac, np.eye(n))
    W *= -1.0
    W += np.outer(alpha, alpha)
    P = W * KZ
    g = np.empty(4)
    g[0] = 0.5 * P.sum()
    P *= D
    g[1] = 0.5 * P.sum() / hyper.theta2
    wdiag = np.diag(W)
    g[2] = 0.5 * vy * wdiag.sum()
    g[3] = 0.5 * vw * float(wdiag @ zz_diag)
    return lml, g


def log_marginal_likelihood(hyper: Hyperparams, data: Dataset) -> float:
    K = gram_matrix(data.X, hyper.kernel)
    C = marginal_covariance(K, data.Z, hyper.sigma_y, hyper.sigma_w)
    fac = chol_psd(C)
    alpha = chol_solve(fac, data.y)
    return -0.5 * float(data.y @ alpha) - 0.5 * fac.logdet() - 0.5 * data.n * LOG_2PI


def lml_gradient(hyper: Hyperparams, data: Dataset) -> np.ndarray:
    return lml_and_grad(hyper, data)[1]


# ---------------------------------------------------------------------------
# conditioning and fitting
# ---------------------------------------------------------------------------


def condition(data: Dataset, hyper: Hyperparams, standardization=None, info=None) -> FittedGpx:
    """Factor ``C`` and ``K + sigma_w^2 I`` for fixed hyperparameters."""
    if data.n < 1:
        raise ValueError("need at least one training sample")
    K = gram_matrix(data.X, hyper.kernel)
    M = K
    M[np.diag_indices(data.n)] += hyper.sigma_w**2
    chol_M = chol_psd(M)
    C = M * (data.Z @ data.Z.T)
    C[np.diag_indices(data.n)] += hyper.sigma_y**2
    chol_C = chol_psd(C)
    alpha = chol_solve(chol_C, data.y)
    return FittedGpx(hyper, data, chol_C, alpha, chol_M, standardization, dict(info or {}))


def fit(data: Dataset, init: Hyperparams | None = None, opt=None, restarts: int = 0, seed: int = 0,
        standardization=None) -> FittedGpx:
    """Estimate hyperparameters by maximizing the marginal likelihood, then condition."""
    from .optimize import default_init, fit_hyperparams

    if data.n < 2:
        raise ValueError("fitting needs at least two training samples")
    init = init or default_init(data)
    hyper, res = fit_hyperparams(data, init, opt, restarts=restarts, seed=seed, return_result=True)
    info = {
        "init": init.as_dict(),
        "lml": -res.objective,
        "iterations": res.iterations,
        "converged_by": res.converged_by,
        "lml_trace": [-res.steps[0].f_before] + [-s.f_after for s in res.steps] if res.steps else [-res.objective],
    }
    return condition(data, hyper, standardization, info)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def _check_test(model, X_star, Z_star):
    X_star = np.asarray(X_star, dtype=float)
    Z_star = np.asarray(Z_star, dtype=float)
    if X_star.ndim == 1:
        X_star = X_star[None, :]
    if Z_star.ndim == 1:
        Z_star = Z_star[None, :]
    if X_star.shape[1] != model.m:
        raise ValueError(f"x* has {X_star.shape[1]} features, model expects {model.m}")
    if Z_star.shape[1] != model.d:
        raise ValueError(f"z* has {Z_star.shape[1]} features, model expects {model.d}")
    if X_star.shape[0] != Z_star.shape[0]:
        raise ValueError("x* and z* row counts differ")
    return X_star, Z_star


def _clamp_variance(v):
    v = np.asarray(v, dtype=float)
    if np.any(v < -_NEG_VAR_TOL):
        raise NumericalError(f"predictive variance {v.min():.3e} is negative beyond round-off")
    return np.maximum(v, 0.0)


def predict_y_batch(model: FittedGpx, X_star, Z_star):
    """Predictive means and variances of ``y*`` for a batch of test rows."""
    X_star, Z_star = _check_test(model, X_star, Z_star)
    h = model.hyper
    Cs = cross_gram(X_star, model.train.X, h.kernel)
    Cs *= Z_star @ model.train.Z.T
    mean = Cs @ model.alpha
    V = chol_solve(model.chol_C, Cs.T)
    css = h.sigma_y**2 + (h.theta1 + h.sigma_w**2) * np.einsum("ij,ij->i", Z_star, Z_star)
    var = css - np.einsum("ij,ji->i", Cs, V)
    return mean, _clamp_variance(var)


def predict_y(model: FittedGpx, x_star, z_star) -> PredictiveScalar:
    mean, var = predict_y_batch(model, x_star, z_star)
    return PredictiveScalar(float(mean[0]), float(var[0]))


def _predict_w_one(model, k_star, full):
    # B = Zbar kbar_*: column l holds Z[:, l] * k_*
    B = model.train.Z * k_star[:, None]
    mean = B.T @ model.alpha
    V = chol_solve(model.chol_C, B)
    kss = model.hyper.theta1 + model.hyper.sigma_w**2
    if full:
        cov = -(B.T @ V)
        cov = 0.5 * (cov + cov.T)
        cov[np.diag_indices_from(cov)] += kss
        var = np.diag(cov).copy()
    else:
        cov = None
        var = kss - np.einsum("ij,ij->j", B, V)
    return mean, cov, var


def predict_w(model: FittedGpx, x_star, z_star) -> PredictiveWeights:
    """Predictive law of the weight vector at ``x_star``.

    With ``A = kbar_*^T L^-1``, ``L = Kbar + sigma_w^2 I`` and
    ``S = L - L Zbar^T C^-1 Zbar L`` the law is
    ``N(sigma_y^-2 A S Zbar^T y, cbar_** - A kbar_* + A S A^T)``. Because
    ``A L = kbar_*^T`` and ``Zbar L Zbar^T = C - sigma_y^2 I`` this reduces
    exactly to

        mean = B^T C^-1 y,   cov = (k(x*, x*) + sigma_w^2) I - B^T C^-1 B,

    with ``B = Zbar kbar_*`` the ``n x d`` matrix ``Z[i, l] * k(x*, x_i)``.
    The ``L^-1`` terms cancel, so one solve against the cached factor of
    ``C`` suffices: ``O(d n^2 + d^2 n)`` per test point. ``z_star`` only
    enters through the dimension check.
    """
    X_star, _ = _check_test(model, x_star, z_star)
    k_star = cross_gram(X_star, model.train.X, model.hyper.kernel)[0]
    mean, cov, var = _predict_w_one(model, k_star, model.d <= FULL_COVARIANCE_MAX_D)
    return PredictiveWeights(mean, cov, _clamp_variance(var))


def predict_w_batch(model: FittedGpx, X_star, Z_star, full: bool | None = None):
    """Weight means ``(T, d)``, variances ``(T, d)`` and, if ``full``, covariances ``(T, d, d)``."""
    X_star, Z_star = _check_test(model, X_star, Z_star)
    if full is None:
        full = model.d <= FULL_COVARIANCE_MAX_D
    Ks = cross_gram(X_star, model.train.X, model.hyper.kernel)
    T, d = X_star.shape[0], model.d
    means = np.empty((T, d))
    variances = np.empty((T, d))
    covs = np.empty((T, d, d)) if full else None
    for t in range(T):
        mean, cov, var = _predict_w_one(model, Ks[t], full)
        means[t] = mean
        variances[t] = var
        if full:
            covs[t] = cov
    return means, _clamp_variance(variances), covs


def posterior_w_train(model: FittedGpx):
    """Posterior means and marginal variances of the training weights, each ``(n, d)``.

    The ``n*d`` posterior covariance ``S`` is block structured with every
    diagonal block ``L`` equal to ``M = K + sigma_w^2 I``; the mean collapses
    to ``M (Z * C^-1 y)`` and block ``l`` of ``diag(S)`` is
    ``diag(M) - diag(M D_l C^-1 D_l M)`` with ``D_l = diag(Z[:, l])``.
    """
    tr, h = model.train, model.hyper
    M = gram_matrix(tr.X, h.kernel)
    M[np.diag_indices(tr.n)] += h.sigma_w**2
    means = M @ (tr.Z * model.alpha[:, None])
    mdiag = np.diag(M).copy()
    var = np.empty((tr.n, tr.d))
    Lc = model.chol_C.lower
    for l in range(tr.d):
        Q = linalg.solve_triangular(Lc, tr.Z[:, l, None] * M, lower=True, check_finite=False)
        var[:, l] = mdiag - np.einsum("ij,ij->j", Q, Q)
    return means, _clamp_variance(var)


def explain_batch(model: FittedGpx, X_star, Z_star) -> list[Explanation]:
    X_star, Z_star = _check_test(model, X_star, Z_star)
    wm, wv, _ = predict_w_batch(model, X_star, Z_star, full=False)
    ym, yv = predict_y_batch(model, X_star, Z_star)
    phi = wm * Z_star
    return [
        Explanation(wm[t], np.sqrt(wv[t]), phi[t], float(ym[t]), float(np.sqrt(yv[t])))
        for t in range(X_star.shape[0])
    ]


def explain(model: FittedGpx, x_star, z_star) -> Explanation:
    """Weights, their stds, contributions ``w_l * z_l`` and the prediction at one point."""
    return explain_batch(model, x_star, z_star)[0]


# ---------------------------------------------------------------------------
# GPR baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FittedGpr:
    kernel: KernelParams
    sigma_y: float
    X: np.ndarray
    y: np.ndarray
    chol: CholFactor
    alpha: np.ndarray
    info: dict = field(default_factory=dict, compare=False)


def gpr_condition(X, y, kernel: KernelParams, sigma_y: float, info=None) -> FittedGpr:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    Ky = gram_matrix(X, kernel)
    Ky[np.diag_indices(X.shape[0])] += sigma_y**2
    fac = chol_psd(Ky)
    return FittedGpr(kernel, float(sigma_y), X, y, fac, chol_solve(fac, y), dict(info or {}))


def _gpr_lml_and_grad(u, D, y, floor):
    t1, t2 = np.exp(u[0]), np.exp(u[1])
    vy = max(np.exp(u[2]), floor)
    n = y.size
    K = t1 * np.exp(-D / t2)
    Ky = K.copy()
    Ky[np.diag_indices(n)] += vy
    fac = chol_psd(Ky)
    alpha = chol_solve(fac, y)
    lml = -0.5 * float(y @ alpha) - 0.5 * fac.logdet() - 0.5 * n * LOG_2PI
    W = np.outer(alpha, alpha) - fac.inverse()
    P = W * K
    g = np.array([0.5 * P.sum(), 0.5 * (P * D).sum() / t2, 0.5 * vy * np.trace(W)])
    if np.exp(u[2]) < floor:
        g[2] = 0.0
    return lml, g


def gpr_log_marginal_likelihood(X, y, kernel: KernelParams, sigma_y: float) -> float:
    D = sq_dist(X)
    u = np.log([kernel.theta1, kernel.theta2, sigma_y**2])
    return _gpr_lml_and_grad(u, D, np.asarray(y, dtype=float), 0.0)[0]


def gpr_fit(data: Dataset, init: Hyperparams | None = None, opt=None) -> FittedGpr:
    """Exact GP regression on ``data.X``; ``init`` supplies the kernel and sigma_y start."""
    from .optimize import NOISE_FLOOR, OptimizationError, default_init, lbfgs_minimize

    init = init or default_init(data)
    D = sq_dist(data.X)
    y = data.y

    def negobj(u):
        try:
            val, g = _gpr_lml_and_grad(u, D, y, NOISE_FLOOR)
        except np.linalg.LinAlgError:
            return np.inf, np.full(3, np.nan)
        return -val, -g

    u0 = np.log([init.theta1, init.theta2, max(init.sigma_y**2, NOISE_FLOOR)])
    res = lbfgs_minimize(negobj, None, u0, opt)
    if not np.isfinite(res.objective):
        raise OptimizationError("GPR objective not finite", res.argmin, res.objective)
    u = res.argmin
    kernel = KernelParams(float(np.exp(u[0])), float(np.exp(u[1])))
    sigma_y = float(np.sqrt(max(np.exp(u[2]), NOISE_FLOOR)))
    info = {"lml": -res.objective, "iterations": res.iterations, "converged_by": res.converged_by}
    return gpr_condition(data.X, y, kernel, sigma_y, info)


def gpr_predict_batch(model: FittedGpr, X_star):
    X_star = np.asarray(X_star, dtype=float)
    if X_star.ndim == 1:
        X_star = X_star[None, :]
    if X_star.shape[1] != model.X.shape[1]:
        raise ValueError(f"x* has {X_star.shape[1]} features, model expects {model.X.shape[1]}")
    Ks = cross_gram(X_star, model.X, model.kernel)
    mean = Ks @ model.alpha
    V = chol_solve(model.chol, Ks.T)
    var = model.kernel.theta1 + model.sigma_y**2 - np.einsum("ij,ji->i", Ks, V)
    return mean, _clamp_variance(var)


def gpr_predict(model: FittedGpr, x_star) -> PredictiveScalar:
    mean, var = gpr_predict_batch(model, x_star)
    return PredictiveScalar(float(mean[0]), float(var[0]))
