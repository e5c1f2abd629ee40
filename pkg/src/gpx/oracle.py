"""Dense reference implementations used to check the structured code paths.

Everything here builds the ``n*d``-dimensional augmented matrices verbatim
and inverts them directly. It is slow on purpose and refuses problems with
``n * d > 64``. The generative sampler draws ``(G, W, y)`` from the model's
prior so that the analytic marginal covariance can be checked by Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import chol_psd, cross_gram, gram_matrix
from .model import Hyperparams, PredictiveScalar, PredictiveWeights

__all__ = [
    "DenseAugmented",
    "OracleSizeError",
    "MAX_ND",
    "build_dense",
    "build_dense_from_data",
    "oracle_marginal_covariance",
    "oracle_predict_y",
    "oracle_posterior_W",
    "oracle_predict_w",
    "sample_generative",
]

MAX_ND = 64


class OracleSizeError(ValueError):
    pass


@dataclass(frozen=True)
class DenseAugmented:
    Kbar: np.ndarray  # (nd, nd) block diagonal, d copies of K
    Zbar: np.ndarray  # (n, nd) = [diag(Z[:, 0]), ..., diag(Z[:, d-1])]
    kbar_star: np.ndarray | None  # (nd, d), block (l, l) = k_*
    L: np.ndarray  # Kbar + sigma_w^2 I
    K: np.ndarray
    k_star: np.ndarray | None
    k_star_star: float | None

    @property
    def n(self) -> int:
        return self.Zbar.shape[0]

    @property
    def d(self) -> int:
        return self.Zbar.shape[1] // self.n


def build_dense(K, Z, k_star, hyper: Hyperparams, k_star_star=None) -> DenseAugmented:
    K = np.asarray(K, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    n, d = Z.shape
    if K.shape != (n, n):
        raise ValueError(f"K has shape {K.shape}, expected {(n, n)}")
    if n * d > MAX_ND:
        raise OracleSizeError(f"oracle limited to n*d <= {MAX_ND}, got {n * d}")
    Kbar = np.zeros((n * d, n * d))
    Zbar = np.zeros((n, n * d))
    for l in range(d):
        Kbar[l * n:(l + 1) * n, l * n:(l + 1) * n] = K
        Zbar[:, l * n:(l + 1) * n] = np.diag(Z[:, l])
    kbar = None
    if k_star is not None:
        k_star = np.asarray(k_star, dtype=float).reshape(-1)
        if k_star.shape[0] != n:
            raise ValueError("k_star length does not match n")
        kbar = np.zeros((n * d, d))
        for l in range(d):
            kbar[l * n:(l + 1) * n, l] = k_star
    L = Kbar + hyper.sigma_w**2 * np.eye(n * d)
    kss = hyper.theta1 if k_star_star is None else float(k_star_star)
    return DenseAugmented(Kbar, Zbar, kbar, L, K, k_star, kss)


def build_dense_from_data(X, Z, hyper: Hyperparams, x_star=None) -> DenseAugmented:
    K = gram_matrix(X, hyper.kernel)
    k_star = None
    if x_star is not None:
        k_star = cross_gram(np.atleast_2d(x_star), X, hyper.kernel)[0]
    return build_dense(K, Z, k_star, hyper)


def oracle_marginal_covariance(dense: DenseAugmented, hyper: Hyperparams) -> np.ndarray:
    Zb = dense.Zbar
    return hyper.sigma_y**2 * np.eye(dense.n) + Zb @ dense.L @ Zb.T


def oracle_predict_y(dense: DenseAugmented, y, z_star, hyper: Hyperparams) -> PredictiveScalar:
    """Condition the explicit ``(n+1)``-dimensional joint Gaussian of ``(y, y*)``."""
    z_star = np.asarray(z_star, dtype=float).reshape(-1)
    n = dense.n
    C = oracle_marginal_covariance(dense, hyper)
    # cov(vec W, w*) = kbar_*, so cov(y, y*) = Zbar kbar_* z_*
    c_star = dense.Zbar @ dense.kbar_star @ z_star
    cbar_ss = (dense.k_star_star + hyper.sigma_w**2) * np.eye(dense.d)
    c_ss = hyper.sigma_y**2 + z_star @ cbar_ss @ z_star
    joint = np.zeros((n + 1, n + 1))
    joint[:n, :n] = C
    joint[:n, n] = joint[n, :n] = c_star
    joint[n, n] = c_ss
    Cinv = np.linalg.inv(joint[:n, :n])
    mean = joint[n, :n] @ Cinv @ np.asarray(y, dtype=float)
    var = joint[n, n] - joint[n, :n] @ Cinv @ joint[:n, n]
    return PredictiveScalar(float(mean), float(var))


def oracle_posterior_W(dense: DenseAugmented, y, hyper: Hyperparams, variant: str = "main_text",
                       check_tol: float = 1e-9):
    """Posterior mean and covariance of ``vec(W)`` by direct inversion and by Woodbury.

    ``variant="main_text"`` uses the prior ``N(0, Kbar + sigma_w^2 I)``;
    ``variant="appendix"`` uses ``N(0, Kbar)`` with
    ``D = sigma_y^2 I + K * Z Z^T``. Returns ``(mean, S, S_direct)`` after
    asserting the two covariance forms agree within ``check_tol`` (scaled by
    the prior's magnitude).
    """
    y = np.asarray(y, dtype=float)
    n = dense.n
    vy = hyper.sigma_y**2
    if variant == "main_text":
        prior = dense.L
    elif variant == "appendix":
        prior = dense.Kbar
    else:
        raise ValueError(f"unknown variant {variant!r}")
    Zb = dense.Zbar
    # Woodbury form: S = P - P Zb^T (sigma_y^2 I + Zb P Zb^T)^-1 Zb P
    Dm = vy * np.eye(n) + Zb @ prior @ Zb.T
    S = prior - prior @ Zb.T @ np.linalg.inv(Dm) @ Zb @ prior
    S = 0.5 * (S + S.T)
    # direct inversion of the posterior precision P^-1 + Zb^T Zb / sigma_y^2, done in
    # whitened coordinates so a nearly singular Kbar is never inverted on its own
    evals, evecs = np.linalg.eigh(prior)
    if np.min(evals) < -1e-10 * max(1.0, np.max(evals)):
        raise np.linalg.LinAlgError(f"prior of the {variant} variant is not positive semidefinite")
    R = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    inner = np.eye(prior.shape[0]) + R @ Zb.T @ Zb @ R / vy
    S_direct = R @ np.linalg.inv(inner) @ R
    S_direct = 0.5 * (S_direct + S_direct.T)
    scale = max(1.0, float(np.max(np.abs(prior))))
    err = float(np.max(np.abs(S - S_direct)))
    if err > check_tol * scale:
        raise AssertionError(f"Woodbury and direct posterior covariances differ by {err:.3e} ({variant})")
    mean = S @ Zb.T @ y / vy
    return mean, S, S_direct


def oracle_predict_w(dense: DenseAugmented, y, hyper: Hyperparams, variant: str = "main_text") -> PredictiveWeights:
    """Dense ``N(sigma_y^-2 A S Zbar^T y, cbar_** - A kbar_* + A S A^T)``."""
    y = np.asarray(y, dtype=float)
    _, S, _ = oracle_posterior_W(dense, y, hyper, variant)
    A = dense.kbar_star.T @ np.linalg.inv(dense.L)
    cbar_ss = (dense.k_star_star + hyper.sigma_w**2) * np.eye(dense.d)
    mean = A @ S @ dense.Zbar.T @ y / hyper.sigma_y**2
    cov = cbar_ss - A @ dense.kbar_star + A @ S @ A.T
    cov = 0.5 * (cov + cov.T)
    return PredictiveWeights(mean, cov, np.diag(cov).copy())


def sample_generative(X, Z, hyper: Hyperparams, rng_seed: int, count: int):
    """Draw ``count`` samples of ``(G, W, y)`` from the generative model.

    Columns of ``G`` are independent ``N(0, K)``; ``W = G + sigma_w * noise``;
    ``y_i = w_i . z_i + sigma_y * noise``. Draw ``t`` uses its own Philox
    stream keyed by ``rng_seed`` with counter offset ``t``, so any draw can
    be regenerated without the others. Returns arrays shaped
    ``(count, n, d)``, ``(count, n, d)`` and ``(count, n)``.
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    n, d = Z.shape
    K = gram_matrix(X, hyper.kernel)
    Lk = chol_psd(K).lower
    G = np.empty((count, n, d))
    W = np.empty((count, n, d))
    Y = np.empty((count, n))
    for t in range(count):
        gen = np.random.Generator(np.random.Philox(key=rng_seed, counter=[0, t, 0, 0]))
        eps = gen.standard_normal((n, 2 * d + 1))
        G[t] = Lk @ eps[:, :d]
        W[t] = G[t] + hyper.sigma_w * eps[:, d:2 * d]
        Y[t] = np.einsum("ij,ij->i", W[t], Z) + hyper.sigma_y * eps[:, 2 * d]
    return G, W, Y
