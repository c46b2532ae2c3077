"""
Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure during optimisation.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import artifact, pipeline
from . import train as tr
from .bnn import AssignmentError
from .config import default_tree, load_config
from .errors import ConfigError, DataError, NumericError
from .features import load_features

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _write_csv(columns: dict, out: Optional[str]):
    names = list(columns)
    rows = zip(*(columns[n] for n in names))
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        w.writerow([_fmt(float(v)) if not isinstance(v, str) else v for v in r])
    _emit(buf.getvalue(), out)


def _write_records(records: list[dict], out: Optional[str]):
    buf = io.StringIO(newline="")
    if records:
        w = csv.DictWriter(buf, fieldnames=list(records[0]), lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    _emit(buf.getvalue(), out)


def _emit(text: str, out: Optional[str]):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    trace_path = Path(args.trace) if args.trace else cfg.path("output", "trace")
    model_path = Path(args.artifact) if args.artifact else cfg.path("output", "artifact")
    try:
        fitted, trace = pipeline.train(cfg)
    except NumericError as e:
        if e.trace:
            trace_path.parent.mkdir(parents=True, exist_ok=True)
            tr.write_trace_csv(trace_path, e.trace)
        raise
    artifact.save(model_path, pipeline.to_payload(fitted))
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    tr.write_trace_csv(trace_path, trace)
    print(f"{fitted.kind}: {fitted.status} after {fitted.iterations} iterations, "
          f"objective {fitted.objective:.6g}; wrote {model_path} and {trace_path}",
          file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    fitted = pipeline.from_payload(artifact.load(args.model))
    target = args.target if args.target is not None else fitted.config["data"]["target"]
    X = load_features(args.data, fitted.input_dim, target)
    if args.samples is not None:
        cols = pipeline.predict_samples(fitted, X, args.samples, args.seed)
    else:
        cols = pipeline.predict_moments(fitted, X)
    _write_csv(cols, args.output)
    return 0


def cmd_benchmark(args) -> int:
    problems = []
    if args.b < 2 or args.b % 2:
        problems.append("--b: must be an even integer >= 2")
    if args.mbar < 2:
        problems.append("--mbar: must be >= 2")
    if args.n < 1:
        problems.append("--n: must be >= 1")
    if args.budget is not None and not args.budget > 0:
        problems.append("--budget: must be positive")
    if args.t < 2:
        problems.append("--t: must be >= 2")
    if any(not lr > 0 for lr in args.lrs):
        problems.append("--lrs: learning rates must be positive")
    if problems:
        raise ConfigError("invalid benchmark flags", problems)
    spec = tr.SyntheticSpec(b=args.b, mbar=args.mbar, n=args.n, noise_sd=args.noise_sd)
    report = tr.benchmark_direct_vs_reinforce(spec, args.seeds, args.budget,
                                              tuple(args.lrs), args.t,
                                              not args.no_baseline, args.eval_every)
    if args.trace_dir:
        d = Path(args.trace_dir)
        d.mkdir(parents=True, exist_ok=True)
        for r in report.runs:
            name = r.method if r.lr is None else f"{r.method}_lr{r.lr:g}"
            tr.write_trace_csv(d / f"seed{r.seed}_{name}.csv", r.trace)
    _write_records(report.summary(), args.output)
    for row in report.summary():
        print(f"seed {row['seed']}: direct {row['direct_elbo']:.6g} vs best reinforce "
              f"{row['reinforce_elbo']:.6g} (lr {row['reinforce_lr']:g})", file=sys.stderr)
    return 0


def cmd_crossval(args) -> int:
    cfg = load_config(args.config)
    folds = pipeline.crossval(cfg, args.k)
    summary = pipeline.crossval_summary(folds)
    records = [{"fold": f.fold, "n_train": f.n_train, "n_test": f.n_test,
                "rmse": f.rmse, "train_seconds": f.train_seconds,
                "expected_sparsity": f.expected_sparsity} for f in folds]
    _write_records(records, args.output)
    print(f"rmse {summary['rmse_mean']:.6g} +- {summary['rmse_std']:.3g}, "
          f"train {summary['train_seconds_mean']:.3g} s, "
          f"sparsity {summary['expected_sparsity_mean']:.3g}", file=sys.stderr)
    return 0


def cmd_config_dump(args) -> int:
    if args.config:
        text = load_config(args.config, check_paths=False).dump()
    else:
        text = yaml.safe_dump(default_tree(), sort_keys=False)
    _emit(text, args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="direct",
        description="Exact ELBO training and quantised prediction for discrete-prior "
                    "Bayesian models.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = sub.add_parser("train", help="train a model from a YAML config",
                       description="Train a model; writes a JSON artifact and a trace CSV.")
    t.add_argument("-c", "--config", required=True, help="YAML config file")
    t.add_argument("--artifact", help="artifact path (overrides output.artifact)")
    t.add_argument("--trace", help="trace CSV path (overrides output.trace)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict with a trained artifact",
                        description="Predict at the rows of a CSV. Regression models "
                                    "write mean,variance (--moments) or draw_k columns "
                                    "(--samples). Logistic models write logit moments or "
                                    "prob_y0,stderr.")
    pr.add_argument("-m", "--model", required=True, help="model artifact (JSON)")
    pr.add_argument("-d", "--data", required=True,
                    help="CSV with the training feature columns, optionally plus the target")
    mode = pr.add_mutually_exclusive_group()
    mode.add_argument("--moments", action="store_true",
                      help="exact predictive moments (default)")
    mode.add_argument("--samples", type=int, metavar="N",
                      help="N posterior draws per row instead of exact moments")
    pr.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    pr.add_argument("--target", help="target column to drop if present "
                                     "(default: the training config's)")
    pr.add_argument("-o", "--output", help="output CSV (default stdout)")
    pr.set_defaults(func=cmd_predict)

    bm = sub.add_parser("benchmark", help="exact-gradient vs score-function comparison",
                        description="Fit a synthetic RFF GLM with L-BFGS on the exact ELBO "
                                    "and with REINFORCE SGD at each learning rate under the "
                                    "same wall-time budget; write a per-seed summary CSV.")
    bm.add_argument("--b", type=int, default=20, help="number of features (default 20)")
    bm.add_argument("--mbar", type=int, default=3, help="weight levels (default 3)")
    bm.add_argument("--n", type=int, default=1000, help="data points (default 1000)")
    bm.add_argument("--seeds", type=int, nargs="+", default=[0], help="seeds (default 0)")
    bm.add_argument("--budget", type=float,
                    help="seconds per run (default $DIRECT_BENCH_BUDGET or 60)")
    bm.add_argument("--lrs", type=float, nargs="+", default=[1e-3, 1e-2, 1e-1],
                    help="REINFORCE learning rates (default 1e-3 1e-2 1e-1)")
    bm.add_argument("--t", type=int, default=100, help="REINFORCE samples per step")
    bm.add_argument("--noise-sd", type=float, default=0.1, help="target noise sd")
    bm.add_argument("--eval-every", type=int, default=10,
                    help="score REINFORCE iterates exactly every k steps (default 10)")
    bm.add_argument("--no-baseline", action="store_true",
                    help="disable the running-mean baseline")
    bm.add_argument("--trace-dir", help="write one trace CSV per run here")
    bm.add_argument("-o", "--output", help="summary CSV (default stdout)")
    bm.set_defaults(func=cmd_benchmark)

    cv = sub.add_parser("crossval", help="k-fold cross-validation",
                        description="Per-fold RMSE, training seconds and expected "
                                    "sparsity; a summary goes to stderr.")
    cv.add_argument("-c", "--config", required=True, help="YAML config file")
    cv.add_argument("-k", type=int, default=10, help="number of folds (default 10)")
    cv.add_argument("-o", "--output", help="output CSV (default stdout)")
    cv.set_defaults(func=cmd_crossval)

    cf = sub.add_parser("config", help="configuration helpers",
                        description="Configuration helpers.")
    csub = cf.add_subparsers(dest="action", required=True, metavar="ACTION")
    d = csub.add_parser("dump", help="print the resolved configuration",
                        description="Print the config merged over defaults with "
                                    "environment overrides applied (defaults if no -c).")
    d.add_argument("-c", "--config", help="YAML config file")
    d.add_argument("-o", "--output", help="output file (default stdout)")
    d.set_defaults(func=cmd_config_dump)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        for prob in e.problems:
            print(f"  {prob}", file=sys.stderr)
        return EXIT_CONFIG
    except AssignmentError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
