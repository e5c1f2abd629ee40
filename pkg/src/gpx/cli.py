"""Command-line front end.

Every command writes one JSON document to stdout and a short human summary
to stderr. Exit codes: 0 ok, 2 input error, 3 numerical failure, 4 metric
precondition violated, 5 selftest failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DataError,
    ModelFileError,
    SplitSpec,
    destandardize_prediction,
    load_csv,
    load_model,
    read_table,
    save_model,
    smooth_weights,
    standardize_apply,
    standardize_fit,
    synth_global_linear,
    synth_smooth_local,
    train_test_split,
    write_csv,
)
from .metrics import (
    MetricConfig,
    MetricPreconditionError,
    MetricReport,
    faithfulness,
    gpx_predict_fn,
    mse,
    stability,
    sufficiency_curve,
)
from .model import (
    Dataset,
    NumericalError,
    PredictiveScalar,
    explain_batch,
    fit,
    gpr_fit,
    gpr_predict_batch,
    predict_w_batch,
    predict_y_batch,
)
from .optimize import OptimizationError, OptimizerConfig, default_init

OUTPUT_SCHEMA_VERSION = 1

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_METRIC, EXIT_SELFTEST = 0, 2, 3, 4, 5

logger = logging.getLogger("gpx")


class SelftestFailure(RuntimeError):
    pass


def _emit(kind, payload, stream=None):
    doc = {"schema_version": OUTPUT_SCHEMA_VERSION, "command": kind, **payload}
    print(json.dumps(doc, indent=1, allow_nan=False), file=stream or sys.stdout)


def _note(msg):
    print(msg, file=sys.stderr)


def _split_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else None


def _parse_k(text):
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(t) for t in text.split(",") if t.strip())


def _read_inputs(path, model):
    """X, Z (and y when the target column exists) for rows of an input CSV."""
    header, values = read_table(path)
    tr = model.train

    def cols(names):
        missing = [c for c in names if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        return values[:, [header.index(c) for c in names]]

    X = cols(tr.x_names)
    Z = None if tr.z_is_x else cols(tr.z_names)
    target = model.info.get("target")
    y = values[:, header.index(target)] if target and target in header else None
    return Dataset(X, Z, y, tr.x_names, tr.z_names), y is not None


def _to_model_space(model, data):
    stats = model.standardization
    return data if stats is None else standardize_apply(stats, data)


def _to_original(model, mean, var):
    stats = model.standardization
    if stats is None:
        return mean, var
    p = destandardize_prediction(stats, PredictiveScalar(mean, var))
    return p.mean, p.variance


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fit(args):
    data = load_csv(args.data, args.target, _split_list(args.z_cols), _split_list(args.x_cols))
    train, test = train_test_split(data, SplitSpec(args.split, args.seed))
    stats = standardize_fit(train)
    tr = standardize_apply(stats, train)
    te = standardize_apply(stats, test)
    init = default_init(tr)
    cfg = OptimizerConfig(max_iters=args.max_iters)
    model = fit(tr, init, cfg, restarts=args.restarts, seed=args.seed, standardization=stats)
    model.info["target"] = args.target

    def report(pred_mean, d):
        return mse(pred_mean * stats.target_std + stats.target_mean, d.y * stats.target_std + stats.target_mean)

    result = {
        "n_train": train.n,
        "n_test": test.n,
        "split": f"train={train.n} test={test.n}",
        "init": init.as_dict(),
        "median_heuristic_theta2": init.theta2,
        "hyperparams": model.hyper.as_dict(),
        "lml": model.info["lml"],
        "iterations": model.info["iterations"],
        "converged_by": model.info["converged_by"],
        "mse_train": report(predict_y_batch(model, tr.X, tr.Z)[0], tr),
        "mse_test": report(predict_y_batch(model, te.X, te.Z)[0], te),
        "standardization": stats.as_dict(),
        "model_path": str(args.out),
    }
    extra = {}
    if args.baseline == "gpr":
        g = gpr_fit(tr, init, cfg)
        result["baseline_gpr"] = {
            "theta1": g.kernel.theta1,
            "theta2": g.kernel.theta2,
            "sigma_y": g.sigma_y,
            "lml": g.info["lml"],
            "mse_train": report(gpr_predict_batch(g, tr.X)[0], tr),
            "mse_test": report(gpr_predict_batch(g, te.X)[0], te),
        }
        extra["baseline_gpr"] = result["baseline_gpr"]
    save_model(model, args.out, extra)
    _emit("fit", result)
    _note(f"{result['split']}  lml={result['lml']:.4f}  mse_test={result['mse_test']:.6g}  -> {args.out}")
    return EXIT_OK


def cmd_predict(args):
    model = load_model(args.model)
    data, _ = _read_inputs(args.input, model)
    ds = _to_model_space(model, data)
    mean, var = predict_y_batch(model, ds.X, ds.Z)
    rows = []
    for i in range(ds.n):
        mo, vo = _to_original(model, float(mean[i]), float(var[i]))
        rows.append({"row": i, "mean": mo, "std": math.sqrt(vo)})
    _emit("predict", {"units": "original", "predictions": rows})
    return EXIT_OK


def _explanation_rows(model, data):
    ds = _to_model_space(model, data)
    names = list(model.train.z_names)
    out = []
    for i, e in enumerate(explain_batch(model, ds.X, ds.Z)):
        mo, vo = _to_original(model, e.prediction_mean, e.prediction_std**2)
        out.append({
            "row": i,
            "prediction_mean": e.prediction_mean,
            "prediction_std": e.prediction_std,
            "prediction_mean_original": mo,
            "prediction_std_original": math.sqrt(vo),
            "features": [
                {
                    "name": names[l],
                    "weight_mean": float(e.weights_mean[l]),
                    "weight_std": float(e.weights_std[l]),
                    "contribution": float(e.contributions[l]),
                }
                for l in range(len(names))
            ],
        })
    return out


EXPLAIN_CSV_HEADER = [
    "row", "feature", "weight_mean", "weight_std", "contribution",
    "prediction_mean", "prediction_std", "prediction_mean_original", "prediction_std_original",
]


def cmd_explain(args):
    model = load_model(args.model)
    data, _ = _read_inputs(args.input, model)
    rows = _explanation_rows(model, data)
    stats = model.standardization
    doc = {
        "schema_version": OUTPUT_SCHEMA_VERSION,
        "kind": "explanation",
        "units": {
            "weights": "standardized inputs and target" if stats else "model units",
            "contributions": "standardized target; they sum to prediction_mean",
            "prediction_mean_original": "original target units",
        },
        "standardization": stats.as_dict() if stats else None,
        "rows": rows,
    }
    if args.format == "json":
        Path(args.out).write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n", encoding="utf-8")
    else:
        flat = []
        for r in rows:
            for f in r["features"]:
                flat.append([r["row"], f["name"], f["weight_mean"], f["weight_std"], f["contribution"],
                             r["prediction_mean"], r["prediction_std"],
                             r["prediction_mean_original"], r["prediction_std_original"]])
        write_csv(args.out, EXPLAIN_CSV_HEADER, flat)
    worst = max(abs(sum(f["contribution"] for f in r["features"]) - r["prediction_mean"]) for r in rows)
    _emit("explain", {"rows": len(rows), "format": args.format, "out": str(args.out),
                      "max_contribution_sum_error": worst})
    _note(f"explained {len(rows)} rows -> {args.out}")
    return EXIT_OK


def cmd_eval(args):
    model = load_model(args.model)
    data, has_y = _read_inputs(args.test, model)
    ds = _to_model_space(model, data)
    metrics = _split_list(args.metrics)
    unknown = set(metrics) - {"faithfulness", "sufficiency", "stability", "mse"}
    if unknown:
        raise DataError(f"unknown metric(s): {sorted(unknown)}")
    k_req = _parse_k(args.k)
    if args.k == DEFAULT_K:
        k_values = tuple(k for k in k_req if k <= model.d)
    else:
        k_values = k_req
    cfg = MetricConfig(epsilon=args.epsilon, k_values=k_values, discrepancy=args.discrepancy)
    report = MetricReport()
    predict_fn = gpx_predict_fn(model)
    needs_phi = {"faithfulness", "sufficiency"} & set(metrics)
    if needs_phi:
        # check the precondition before spending time on explanations
        if not ds.z_is_x:
            raise MetricPreconditionError(
                "faithfulness and sufficiency need Z to be the same representation as X: "
                "removing a feature from a separate simplified input does not change the model input"
            )
    wm = None
    if needs_phi or "stability" in metrics:
        wm, _, _ = predict_w_batch(model, ds.X, ds.Z, full=False)
    if "faithfulness" in metrics:
        v, used, skipped = faithfulness(predict_fn, wm * ds.Z, ds, cfg, return_counts=True)
        report.faithfulness = v
        report.samples_evaluated["faithfulness"] = used
        report.samples_excluded["faithfulness"] = skipped
    if "sufficiency" in metrics:
        report.sufficiency = sufficiency_curve(predict_fn, wm * ds.Z, ds, cfg)
        report.samples_evaluated["sufficiency"] = ds.n
    if "stability" in metrics:
        v, used, skipped, pairs = stability(ds, wm, cfg, return_counts=True)
        report.stability = v
        report.samples_evaluated["stability"] = used
        report.samples_excluded["stability"] = skipped
        report.samples_excluded["stability_identical_z_pairs"] = pairs
    if "mse" in metrics:
        if not has_y:
            raise DataError(f"{args.test}: target column {model.info.get('target')!r} needed for mse")
        mean, _ = predict_y_batch(model, ds.X, ds.Z)
        stats = model.standardization
        pred = mean if stats is None else mean * stats.target_std + stats.target_mean
        report.mse = mse(pred, data.y)
        report.samples_evaluated["mse"] = ds.n
    header = {
        "epsilon": cfg.epsilon,
        "k_requested": args.k,
        "k_values": list(k_values),
        "removal_value": cfg.removal_value,
        "discrepancy": cfg.discrepancy,
        "metrics": metrics,
        "n_test": ds.n,
    }
    _emit("eval", {"config": header, "report": report.as_dict()})
    _note("  ".join(f"{k}={v}" for k, v in report.as_dict().items() if v not in (None, {})))
    return EXIT_OK


def cmd_synth(args):
    if args.n < 1 or args.d < 1:
        raise DataError("--n and --d must be positive")
    out = Path(args.out)
    names = [f"x{i}" for i in range(args.d)]
    if args.kind == "global":
        data, w = synth_global_linear(args.n, args.d, args.noise, args.seed)
        truth = {"kind": "global", "weights": w.tolist(), "noise_std": args.noise}
    else:
        data, wf = synth_smooth_local(args.n, args.d, args.seed, args.noise)
        truth = {"kind": "smooth", "noise_std": args.noise, "weights_per_row": wf(data.X).tolist()}
    write_csv(out, names + ["y"], np.column_stack([data.X, data.y]).tolist())
    sidecar = out.with_name(out.name + ".truth.json")
    truth.update({"schema_version": OUTPUT_SCHEMA_VERSION, "n": args.n, "d": args.d, "seed": args.seed,
                  "columns": names, "target": "y"})
    sidecar.write_text(json.dumps(truth, indent=1) + "\n", encoding="utf-8")
    _emit("synth", {"out": str(out), "truth": str(sidecar), "n": args.n, "d": args.d, "kind": args.kind})
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    results, elapsed = run_selftest(args.trials, args.seed, corrupt=args.corrupt)
    failed = [r for r in results if not r.passed]
    _emit("selftest", {
        "trials": args.trials,
        "seed": args.seed,
        "elapsed_seconds": elapsed,
        "passed": not failed,
        "checks": [r.as_dict() for r in results],
    })
    for r in results:
        _note(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<24} max_error={r.max_error:.3e} tol={r.tolerance:.0e}")
    if failed:
        names = ", ".join(f"{r.name} (instance seed {r.worst_seed})" for r in failed)
        raise SelftestFailure(f"selftest failed: {names}")
    return EXIT_OK


DEFAULT_K = "1..10"


def build_parser():
    p = argparse.ArgumentParser(prog="gpx", description="GP regression with per-sample linear explanations")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="standardize, split, fit and save a model")
    f.add_argument("--data", required=True)
    f.add_argument("--target", required=True)
    f.add_argument("--z-cols", help="comma-separated simplified-input columns (default: same as X)")
    f.add_argument("--x-cols", help="comma-separated input columns (default: all but the target)")
    f.add_argument("--split", type=float, default=0.8)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--restarts", type=int, default=0)
    f.add_argument("--max-iters", type=int, default=200)
    f.add_argument("--baseline", choices=["gpr"])
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="predictive mean/std in original target units")
    pr.add_argument("--model", required=True)
    pr.add_argument("--input", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("explain", help="per-row weights, contributions and predictions")
    e.add_argument("--model", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=["json", "csv"], default="json")
    e.set_defaults(func=cmd_explain)

    ev = sub.add_parser("eval", help="interpretability metrics on a test CSV")
    ev.add_argument("--model", required=True)
    ev.add_argument("--test", required=True)
    ev.add_argument("--metrics", default="faithfulness,sufficiency,stability,mse")
    ev.add_argument("--epsilon", type=float, default=0.05)
    ev.add_argument("--k", default=DEFAULT_K, help="'1..10' or a comma list")
    ev.add_argument("--discrepancy", choices=["squared", "absolute"], default="squared")
    ev.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic dataset and its ground truth")
    s.add_argument("--kind", choices=["global", "smooth"], required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("selftest", help="oracle equivalence checks on random instances")
    t.add_argument("--trials", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--corrupt", help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_selftest)
    return p


def _thread_limit():
    raw = os.environ.get("GPX_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(max(1, int(raw)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "noise", 0) is None:
        args.noise = 0.1 if args.kind == "global" else 0.05
    try:
        with _thread_limit():
            return args.func(args)
    except (DataError, ModelFileError, FileNotFoundError) as exc:
        _note(f"error: {exc}")
        return EXIT_INPUT
    except MetricPreconditionError as exc:
        _note(f"metric precondition: {exc}")
        return EXIT_METRIC
    except SelftestFailure as exc:
        _note(str(exc))
        return EXIT_SELFTEST
    except (np.linalg.LinAlgError, NumericalError, OptimizationError, FloatingPointError) as exc:
        _note(f"numerical error: {exc}")
        return EXIT_NUMERIC
    except ValueError as exc:
        _note(f"error: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
