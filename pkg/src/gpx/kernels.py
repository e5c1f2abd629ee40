"""Scaled RBF kernel, Gram matrices and jittered Cholesky factorization.

Everything here is a pure function of its arguments. Matrices are plain
``numpy`` arrays; symmetry of Gram matrices is enforced on construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

__all__ = [
    "KernelParams",
    "CholFactor",
    "SingularMatrixError",
    "DEFAULT_JITTER",
    "rbf_kernel",
    "sq_dist",
    "gram_matrix",
    "cross_gram",
    "chol_psd",
    "chol_solve",
    "hadamard",
]

# Relative to the mean diagonal of the matrix being factored.
DEFAULT_JITTER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when no jitter in the schedule yields a Cholesky factor."""

    def __init__(self, message, jitter_tried):
        super().__init__(message)
        self.jitter_tried = jitter_tried


@dataclass(frozen=True)
class KernelParams:
    """Scale ``theta1`` and squared-distance bandwidth ``theta2`` of the RBF kernel."""

    theta1: float
    theta2: float

    def __post_init__(self):
        for name in ("theta1", "theta2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor of ``M + jitter_used * I``."""

    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def order(self) -> int:
        return self.lower.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def inverse(self) -> np.ndarray:
        return chol_solve(self, np.eye(self.order))


def rbf_kernel(x, x2, p: KernelParams) -> float:
    """``theta1 * exp(-||x - x2||^2 / theta2)`` for two single inputs."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {x2.shape}")
    d2 = float(np.sum((x - x2) ** 2))
    return p.theta1 * float(np.exp(-d2 / p.theta2))


def sq_dist(X, X2=None) -> np.ndarray:
    """Pairwise squared Euclidean distances, accumulated one feature at a time.

    Accumulating differences (rather than expanding ``|x|^2 + |x'|^2 - 2x.x'``)
    keeps the diagonal exactly zero and avoids cancellation.
    """
    X = _as_2d(X)
    X2 = X if X2 is None else _as_2d(X2)
    if X.shape[1] != X2.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {X2.shape[1]} features")
    D = np.zeros((X.shape[0], X2.shape[0]))
    for j in range(X.shape[1]):
        diff = X[:, j, None] - X2[None, :, j]
        diff *= diff
        D += diff
    return D


def gram_matrix(X, p: KernelParams) -> np.ndarray:
    """Symmetric ``n x n`` Gram matrix of the scaled RBF kernel."""
    X = _as_2d(X)
    if X.shape[0] == 0:
        raise ValueError("gram_matrix needs at least one input")
    K = sq_dist(X)
    K *= -1.0 / p.theta2
    np.exp(K, out=K)
    K *= p.theta1
    # exact symmetry; the accumulated distances already are, this guards exp
    K = 0.5 * (K + K.T)
    return K


def cross_gram(X_star, X, p: KernelParams) -> np.ndarray:
    """Kernel values between test rows ``X_star`` and training rows ``X``."""
    K = sq_dist(X_star, X)
    K *= -1.0 / p.theta2
    np.exp(K, out=K)
    K *= p.theta1
    return K


def chol_psd(M, jitter_schedule=None) -> CholFactor:
    """Cholesky factor of ``M + j I`` for the first ``j`` in the schedule that works.

    With the default schedule the jitters are relative to the mean diagonal
    of ``M`` (falling back to absolute values when that mean is not
    positive). An explicit schedule is taken as absolute values.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if jitter_schedule is None:
        scale = float(np.mean(np.diag(M))) if M.size else 1.0
        if not (np.isfinite(scale) and scale > 0):
            scale = 1.0
        jitter_schedule = [j * scale for j in DEFAULT_JITTER]
    if not np.all(np.isfinite(M)):
        raise SingularMatrixError("matrix has non-finite entries", jitter_tried=None)
    eye = np.eye(M.shape[0])
    last = None
    for j in jitter_schedule:
        last = float(j)
        try:
            Lo = linalg.cholesky(M + last * eye if last else M, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(Lo) > 0):
            return CholFactor(Lo, last)
    raise SingularMatrixError(
        f"Cholesky failed for every jitter in the schedule (last tried {last:g})",
        jitter_tried=last,
    )


def chol_solve(f: CholFactor, B) -> np.ndarray:
    """Solve ``(L L^T) X = B`` by forward and back substitution."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != f.order:
        raise ValueError(f"dimension mismatch: factor order {f.order}, rhs rows {B.shape[0]}")
    return linalg.cho_solve((f.lower, True), B, check_finite=False)


def hadamard(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    return A * B


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d input array, got ndim={X.ndim}")
    return X
