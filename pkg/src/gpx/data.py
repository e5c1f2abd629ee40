"""Dataset ingestion, standardization, splitting, synthetic data and model files."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Dataset, FittedGpx, Hyperparams, PredictiveScalar, condition

__all__ = [
    "DataError",
    "ModelFileError",
    "StandardizationStats",
    "SplitSpec",
    "load_csv",
    "read_table",
    "write_csv",
    "standardize_fit",
    "standardize_apply",
    "destandardize_prediction",
    "weights_to_original_units",
    "train_test_split",
    "synth_global_linear",
    "synth_smooth_local",
    "smooth_weights",
    "save_model",
    "load_model",
    "model_to_document",
    "model_from_document",
    "MODEL_SCHEMA_VERSION",
]

logger = logging.getLogger(__name__)

MODEL_SCHEMA_VERSION = 1
MODEL_FORMAT = "gpx-model"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ModelFileError(ValueError):
    """Unreadable, truncated, tampered or wrong-version model file."""


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def read_table(path):
    """Header and rows of a CSV file, cells parsed as finite floats."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file (header row required)")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    values = []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: line {r} has {len(row)} cells, header has {len(header)}")
        parsed = []
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise DataError(f"{path}: line {r}, column {header[c]!r}: cannot parse {cell!r} as a finite number")
            parsed.append(v)
        values.append(parsed)
    return header, np.array(values, dtype=float).reshape(len(values), len(header))


def _columns(header, names, path):
    idx = []
    for name in names:
        if name not in header:
            raise DataError(f"{path}: missing column {name!r}")
        idx.append(header.index(name))
    return idx


def load_csv(path, target_column, z_columns=None, x_columns=None) -> Dataset:
    """Load a dataset; X is every non-target column unless ``x_columns`` is given.

    ``Z`` aliases ``X`` unless ``z_columns`` names a separate set.
    """
    header, values = read_table(path)
    if target_column not in header:
        raise DataError(f"{path}: missing target column {target_column!r}")
    if x_columns is None:
        x_columns = [h for h in header if h != target_column]
    if not x_columns:
        raise DataError(f"{path}: no input columns besides the target")
    xi = _columns(header, x_columns, path)
    yi = header.index(target_column)
    if values.shape[0] < 2:
        raise DataError(f"{path}: need at least 2 data rows, found {values.shape[0]}")
    X = values[:, xi]
    Z, z_names = None, None
    if z_columns is not None:
        Z = values[:, _columns(header, z_columns, path)]
        z_names = tuple(z_columns)
    return Dataset(X, Z, values[:, yi], tuple(x_columns), z_names)


def write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------------------
# standardization and splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StandardizationStats:
    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_mean: float
    target_std: float
    constant_features: tuple = ()

    def as_dict(self) -> dict:
        return {
            "feature_means": [float(v) for v in self.feature_means],
            "feature_stds": [float(v) for v in self.feature_stds],
            "target_mean": float(self.target_mean),
            "target_std": float(self.target_std),
            "constant_features": list(self.constant_features),
        }

    @classmethod
    def from_dict(cls, d) -> "StandardizationStats":
        return cls(
            np.asarray(d["feature_means"], dtype=float),
            np.asarray(d["feature_stds"], dtype=float),
            float(d["target_mean"]),
            float(d["target_std"]),
            tuple(d.get("constant_features", ())),
        )


def standardize_fit(train: Dataset) -> StandardizationStats:
    """Population (divide-by-n) means and stds of X and y."""
    mu = train.X.mean(axis=0)
    sd = train.X.std(axis=0)
    const = tuple(int(i) for i in np.flatnonzero(~(sd > 0)))
    if const:
        warnings.warn(f"constant feature columns {list(const)}; their std is set to 1", RuntimeWarning)
        sd = np.where(sd > 0, sd, 1.0)
    ym = float(train.y.mean())
    ys = float(train.y.std())
    if not ys > 0:
        warnings.warn("constant target; its std is set to 1", RuntimeWarning)
        ys = 1.0
    return StandardizationStats(mu, sd, ym, ys, const)


def standardize_apply(stats: StandardizationStats, data: Dataset) -> Dataset:
    """Z-score X and y. Z follows X when it aliases X and is left raw otherwise."""
    X = (data.X - stats.feature_means) / stats.feature_stds
    Z = None if data.z_is_x else data.Z
    y = (data.y - stats.target_mean) / stats.target_std
    return Dataset(X, Z, y, data.x_names, data.z_names)


def destandardize_prediction(stats: StandardizationStats, pred: PredictiveScalar) -> PredictiveScalar:
    return PredictiveScalar(
        pred.mean * stats.target_std + stats.target_mean,
        pred.variance * stats.target_std**2,
    )


def weights_to_original_units(stats: StandardizationStats, weights, z_is_x: bool = True):
    """Convert weights on standardized inputs/targets to original units.

    For aliased ``Z`` a weight on a standardized feature maps to
    ``w * target_std / feature_std``; raw ``Z`` columns only rescale by the
    target std.
    """
    w = np.asarray(weights, dtype=float) * stats.target_std
    if z_is_x:
        w = w / stats.feature_stds
    return w


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


def train_test_split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``floor(n * fraction)`` rows train."""
    n = data.n
    n_train = int(math.floor(n * spec.train_fraction))
    if n_train < 2 or n - n_train < 1:
        raise DataError(f"split of n={n} at {spec.train_fraction} gives train={n_train} test={n - n_train}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------


def synth_global_linear(n: int, d: int, noise_std: float = 0.1, seed: int = 0):
    """``y = X w + noise`` with ``X ~ U[-1, 1]^d`` and a unit-norm ``w``. Returns ``(data, w)``."""
    if n < 1 or d < 1:
        raise DataError("n and d must be positive")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    X = rng.uniform(-1.0, 1.0, size=(n, d))
    y = X @ w
    if noise_std:
        y = y + noise_std * rng.standard_normal(n)
    return Dataset(X, None, y), w


def smooth_weights(X) -> np.ndarray:
    """Ground-truth weight function ``w_l(x) = sin(2 pi x_l) + 0.5 cos(pi x_{l+1 mod d})``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.sin(2 * np.pi * X) + 0.5 * np.cos(np.pi * np.roll(X, -1, axis=1))


def synth_smooth_local(n: int, d: int, seed: int = 0, noise_std: float = 0.05):
    """Locally linear data: ``y_i = w(x_i) . x_i + noise`` with smooth ``w``. Returns ``(data, smooth_weights)``."""
    if n < 1 or d < 1:
        raise DataError("n and d must be positive")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, d))
    y = np.einsum("ij,ij->i", smooth_weights(X), X) + noise_std * rng.standard_normal(n)
    return Dataset(X, None, y), smooth_weights


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------


def _c_diag(data: Dataset, hyper: Hyperparams) -> np.ndarray:
    zz = np.einsum("ij,ij->i", data.Z, data.Z)
    return hyper.sigma_y**2 + (hyper.theta1 + hyper.sigma_w**2) * zz


def model_to_document(model: FittedGpx, extra=None) -> dict:
    tr = model.train
    cd = _c_diag(tr, model.hyper)
    doc = {
        "format": MODEL_FORMAT,
        "schema_version": MODEL_SCHEMA_VERSION,
        "hyperparams": model.hyper.as_dict(),
        "train": {
            "X": tr.X.tolist(),
            "Z": None if tr.z_is_x else tr.Z.tolist(),
            "y": tr.y.tolist(),
            "x_names": list(tr.x_names),
            "z_names": list(tr.z_names),
            "z_is_x": tr.z_is_x,
        },
        "standardization": None if model.standardization is None else model.standardization.as_dict(),
        "fit_info": {k: v for k, v in model.info.items() if k != "lml_trace"},
        "extra": extra or {},
        "checksum": {"c_diag_sum": float(cd.sum()), "c_diag_sumsq": float(cd @ cd), "n": tr.n},
    }
    return doc


def model_from_document(doc) -> tuple[FittedGpx, dict]:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFileError("not a gpx model document")
    version = doc.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise ModelFileError(f"unsupported model schema version {version!r} (expected {MODEL_SCHEMA_VERSION})")
    try:
        hyper = Hyperparams.from_dict(doc["hyperparams"])
        t = doc["train"]
        X = np.asarray(t["X"], dtype=float)
        Z = None if t["z_is_x"] else np.asarray(t["Z"], dtype=float)
        data = Dataset(X, Z, np.asarray(t["y"], dtype=float), tuple(t["x_names"]), tuple(t["z_names"]))
        stats = None if doc["standardization"] is None else StandardizationStats.from_dict(doc["standardization"])
        checksum = doc["checksum"]
        info = dict(doc.get("fit_info", {}))
        extra = dict(doc.get("extra", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed model document: {exc}") from exc
    cd = _c_diag(data, hyper)
    ok = (
        checksum.get("n") == data.n
        and math.isclose(float(cd.sum()), checksum["c_diag_sum"], rel_tol=1e-12)
        and math.isclose(float(cd @ cd), checksum["c_diag_sumsq"], rel_tol=1e-12)
    )
    if not ok:
        raise ModelFileError("checksum of the marginal covariance diagonal does not match")
    return condition(data, hyper, stats, info), extra


def _dumps(doc) -> str:
    # repr-based float output is the shortest string that round-trips exactly
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_model(model: FittedGpx, path, extra=None) -> None:
    Path(path).write_text(_dumps(model_to_document(model, extra)), encoding="utf-8")


def load_model(path, return_extra: bool = False):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"cannot parse model file {path}: {exc}") from exc
    model, extra = model_from_document(doc)
    return (model, extra) if return_extra else model
