"""Interpretability measurements for per-sample linear explanations.

All metrics go through a ``predict_fn(X, Z) -> means`` callable, so the
GPX model and any baseline share one evaluation path. Features are
"removed" by overwriting them with ``removal_value`` (0 by default, the
training mean after standardization) in both ``x`` and ``z``; this only
makes sense when ``Z`` aliases ``X``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MetricConfig",
    "MetricReport",
    "MetricPreconditionError",
    "faithfulness",
    "sufficiency_curve",
    "stability",
    "mse",
    "gpx_predict_fn",
    "gpr_predict_fn",
]


class MetricPreconditionError(ValueError):
    """The metric's assumptions do not hold for this data or explainer."""


@dataclass(frozen=True)
class MetricConfig:
    epsilon: float = 0.05
    k_values: tuple = tuple(range(1, 11))
    removal_value: float = 0.0
    discrepancy: str = "squared"  # or "absolute"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if any(int(k) < 1 for k in self.k_values):
            raise ValueError("k values must be >= 1")
        if self.discrepancy not in ("squared", "absolute"):
            raise ValueError("discrepancy must be 'squared' or 'absolute'")


@dataclass
class MetricReport:
    faithfulness: float | None = None
    sufficiency: dict = field(default_factory=dict)
    stability: float | None = None
    mse: float | None = None
    samples_evaluated: dict = field(default_factory=dict)
    samples_excluded: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "faithfulness": self.faithfulness,
            "sufficiency": {str(k): v for k, v in self.sufficiency.items()},
            "stability": self.stability,
            "mse": self.mse,
            "samples_evaluated": dict(self.samples_evaluated),
            "samples_excluded": dict(self.samples_excluded),
        }


def gpx_predict_fn(model):
    from .model import predict_y_batch

    return lambda X, Z: predict_y_batch(model, X, Z)[0]


def gpr_predict_fn(model):
    from .model import gpr_predict_batch

    return lambda X, Z: gpr_predict_batch(model, X)[0]


def _require_aliased(test):
    if not test.z_is_x and not np.array_equal(test.X, test.Z):
        raise MetricPreconditionError(
            "removal-based metrics need Z to be the same representation as X: "
            "editing a separate simplified input leaves the model input unchanged"
        )


def _predict_masked(predict_fn, X, keep, removal_value):
    """Predict on copies of each row with ``~keep`` features overwritten.

    ``keep`` has shape ``(n, r, d)``: ``r`` masked variants per row.
    """
    n, r, d = keep.shape
    Xm = np.where(keep, X[:, None, :], removal_value).reshape(n * r, d)
    return np.asarray(predict_fn(Xm, Xm), dtype=float).reshape(n, r)


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    na, nb = math.sqrt(a @ a), math.sqrt(b @ b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def faithfulness(predict_fn, contributions, test, cfg: MetricConfig | None = None, return_counts: bool = False):
    """Mean per-sample Pearson correlation between removal effects and contributions.

    For sample ``i`` and feature ``l`` the removal effect is the original
    prediction minus the prediction with feature ``l`` replaced by
    ``removal_value``. Samples whose effects or contributions have zero
    spread are skipped.
    """
    cfg = cfg or MetricConfig()
    _require_aliased(test)
    phi = np.asarray(contributions, dtype=float)
    X = test.X
    n, d = X.shape
    if phi.shape != (n, d):
        raise ValueError(f"contributions shape {phi.shape} does not match test data {(n, d)}")
    if d < 2:
        raise MetricPreconditionError("faithfulness needs at least two features")
    base = np.asarray(predict_fn(X, X), dtype=float)
    keep = ~np.eye(d, dtype=bool)[None, :, :].repeat(n, axis=0)
    removed = _predict_masked(predict_fn, X, keep, cfg.removal_value)
    delta = base[:, None] - removed
    scores = [c for c in (_pearson(delta[i], phi[i]) for i in range(n)) if c is not None]
    if not scores:
        raise MetricPreconditionError("degenerate explanation variance: no sample has a defined correlation")
    value = float(math.fsum(scores) / len(scores))
    if return_counts:
        return value, len(scores), n - len(scores)
    return value


def _topk_keep(phi, k):
    n, d = phi.shape
    # stable sort on -|phi|: ties go to the lower feature index
    order = np.argsort(-np.abs(phi), axis=1, kind="stable")
    keep = np.zeros((n, d), dtype=bool)
    np.put_along_axis(keep, order[:, :k], True, axis=1)
    return keep


def sufficiency_curve(predict_fn, contributions, test, cfg: MetricConfig | None = None) -> dict:
    """Mean discrepancy between full predictions and top-``k``-only predictions, per ``k``."""
    cfg = cfg or MetricConfig()
    _require_aliased(test)
    phi = np.asarray(contributions, dtype=float)
    X = test.X
    n, d = X.shape
    if phi.shape != (n, d):
        raise ValueError(f"contributions shape {phi.shape} does not match test data {(n, d)}")
    ks = [int(k) for k in cfg.k_values]
    if max(ks) > d:
        raise MetricPreconditionError(f"k={max(ks)} exceeds the number of features d={d}")
    base = np.asarray(predict_fn(X, X), dtype=float)
    keep = np.stack([_topk_keep(phi, k) for k in ks], axis=1)
    masked = _predict_masked(predict_fn, X, keep, cfg.removal_value)
    diff = masked - base[:, None]
    disc = diff**2 if cfg.discrepancy == "squared" else np.abs(diff)
    return {k: float(math.fsum(disc[:, j]) / n) for j, k in enumerate(ks)}


def _standardize_columns(W):
    mu = W.mean(axis=0)
    sd = W.std(axis=0)
    out = np.zeros_like(W)
    nz = sd > 0
    out[:, nz] = (W[:, nz] - mu[nz]) / sd[nz]
    return out


def stability(test, weights, cfg: MetricConfig | None = None, return_counts: bool = False):
    """Mean over test samples of the worst weight-change / z-change ratio in an epsilon ball.

    The ball around ``x`` holds the other test samples with
    ``||x' - x|| / m < epsilon``. Weights are z-scored per dimension across
    the test set first. Neighbours with identical ``z`` are ignored, and
    samples left with no neighbour are excluded from the mean.
    """
    cfg = cfg or MetricConfig()
    W = np.asarray(weights, dtype=float)
    X, Z = test.X, test.Z
    n, m = X.shape
    if n < 2:
        raise MetricPreconditionError("stability needs at least two test samples")
    if W.shape[0] != n:
        raise ValueError("one weight vector per test sample is required")
    Ws = _standardize_columns(W)
    scores = []
    excluded_pairs = 0
    for i in range(n):
        dx = np.sqrt(np.sum((X - X[i]) ** 2, axis=1)) / m
        nb = np.flatnonzero(dx < cfg.epsilon)
        nb = nb[nb != i]
        if nb.size == 0:
            continue
        dz = np.sqrt(np.sum((Z[nb] - Z[i]) ** 2, axis=1))
        ok = dz >= 1e-12
        excluded_pairs += int(np.sum(~ok))
        if not np.any(ok):
            continue
        dw = np.sqrt(np.sum((Ws[nb[ok]] - Ws[i]) ** 2, axis=1))
        scores.append(float(np.max(dw / dz[ok])))
    if not scores:
        raise MetricPreconditionError(f"no test sample has a neighbour within epsilon={cfg.epsilon}")
    value = float(math.fsum(scores) / len(scores))
    if return_counts:
        return value, len(scores), n - len(scores), excluded_pairs
    return value


def mse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {t.size} targets")
    if p.size < 1:
        raise ValueError("mse needs at least one value")
    return float(math.fsum((p - t) ** 2) / p.size)
