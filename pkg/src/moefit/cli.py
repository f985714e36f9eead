"""Command-line front door: simulate, fit, select, and predict.

Exit codes: 0 success, 2 usage/validation error, 3 numerical failure.
Every command is deterministic given its full argument list including --seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen, io, tasks
from .estimation import EstimationError, FitConfig, multi_start_fit
from .inference import InferenceError, mean_ci, sandwich_covariance, standard_errors
from .model import ExpertDesign, ModelError
from .selection import SelectionError, bic, param_count, select_g

EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


def _parse_design(text: str) -> ExpertDesign:
    if text == "raw":
        return ExpertDesign("raw")
    if text.startswith("poly:"):
        try:
            return ExpertDesign("poly", int(text.split(":", 1)[1]))
        except (ValueError, ModelError) as err:
            raise UsageError(f"bad --design value {text!r}: {err}") from None
    raise UsageError(f"--design must be 'raw' or 'poly:<degree>', got {text!r}")


def _fit_config(args) -> FitConfig:
    return FitConfig(
        max_cycles=args.max_cycles,
        rel_tol=args.rel_tol,
        variance_floor_factor=args.variance_floor_factor,
        n_starts=args.starts,
        seed=args.seed,
        irls_max_inner=args.irls_max_inner,
    )


def _add_fit_flags(p):
    p.add_argument("--starts", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-cycles", type=int, default=1000)
    p.add_argument("--rel-tol", type=float, default=1e-8)
    p.add_argument("--variance-floor-factor", type=float, default=1e-10)
    p.add_argument("--irls-max-inner", type=int, default=25)
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("MOEFIT_THREADS", "1")))


def _add_data_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--response-col", default="y")
    p.add_argument("--covariate-cols", default=None,
                   help="comma-separated covariate column names")


def _read_data(args, family: str, K: int | None):
    cols = args.covariate_cols.split(",") if args.covariate_cols else None
    return io.read_dataset_csv(
        args.data, io.KIND_FOR_FAMILY[family], K=K,
        response_col=args.response_col, covariate_cols=cols)


def _fit_meta(result, data, family, design, K):
    dim = param_count(result.theta.g, data.p, family, design, K)
    return {
        "logQL": result.q_hat,
        "dim": dim,
        "bic": bic(result.q_hat, dim, data.n),
        "n": data.n,
        "cycles": result.cycles_used,
        "seed": result.seed_used,
        "converged": result.converged,
        "degenerate": result.degenerate,
    }


def cmd_simulate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.what == "three-class":
        data = datagen.gen_three_class(args.n, args.seed)
        params = {"generator": "three-class", "n": args.n, "seed": args.seed}
    elif args.what == "moe":
        if not args.model:
            raise UsageError("simulate moe requires --model")
        theta, _ = io.load_model(args.model)
        low = [float(v) for v in args.x_low.split(",")]
        high = [float(v) for v in args.x_high.split(",")]
        if len(low) == 1:
            low = low * theta.p
        if len(high) == 1:
            high = high * theta.p
        sampler = datagen.uniform_box_sampler(low, high)
        data = datagen.gen_moe_sample(theta, sampler, args.n, args.seed)
        params = {"generator": "moe", "model": str(args.model), "n": args.n,
                  "seed": args.seed, "x_low": low, "x_high": high}
    else:  # switch-signal
        if args.signal_spec:
            spec_doc = json.loads(Path(args.signal_spec).read_text())
            spec = datagen.SignalSpec(
                n=args.n, seed=args.seed,
                breakpoints=tuple(spec_doc["breakpoints"]),
                coefs=tuple(tuple(c) for c in spec_doc["coefs"]),
                noise_sd=tuple(spec_doc["noise_sd"]))
        else:
            spec = datagen.SignalSpec(n=args.n, seed=args.seed)
        data = datagen.gen_switch_signal(spec)
        params = {"generator": "switch-signal", "n": args.n, "seed": args.seed,
                  "breakpoints": list(spec.breakpoints),
                  "coefs": [list(c) for c in spec.coefs],
                  "noise_sd": list(spec.noise_sd)}
    io.write_dataset_csv(args.out, data)
    io.write_sidecar_json(str(args.out) + ".json", params)
    return 0


def cmd_fit(args) -> int:
    design = _parse_design(args.design)
    data = _read_data(args, args.family, args.K)
    config = _fit_config(args)
    result = multi_start_fit(data, args.g, args.family, design, config,
                             n_threads=args.threads)
    covariance = None
    if args.with_covariance:
        sw = sandwich_covariance(data, result.theta)
        covariance = {"order": sw.labels, "matrix": sw.cov.tolist()}
    io.save_model(args.out, result.theta,
                  _fit_meta(result, data, args.family, design, args.K),
                  covariance)
    return 0


def cmd_select(args) -> int:
    if args.G < 1:
        raise UsageError("--G must be >= 1")
    design = _parse_design(args.design)
    data = _read_data(args, args.family, args.K)
    config = _fit_config(args)
    report = select_g(data, args.G, args.family, design, config,
                      n_threads=args.threads)
    best = report.best()
    covariance = None
    if args.with_covariance:
        sw = sandwich_covariance(data, best.fit.theta)
        covariance = {"order": sw.labels, "matrix": sw.cov.tolist()}
    io.save_model(args.out, best.fit.theta,
                  _fit_meta(best.fit, data, args.family, design, args.K),
                  covariance)
    if args.table:
        Path(args.table).write_text(report.to_csv())
    print(f"selected g={report.g_hat}  logQL={best.q_hat:.6f}  "
          f"dim={best.dim}  bic={best.bic:.6f}")
    return 0


def cmd_predict(args) -> int:
    theta, doc = io.load_model(args.model)
    kind = io.KIND_FOR_FAMILY[theta.family]
    cols = args.covariate_cols.split(",") if args.covariate_cols else None
    needs_y = args.mode == "cluster-posterior"
    if needs_y:
        data = io.read_dataset_csv(args.data, kind, K=theta.K,
                                   response_col=args.response_col,
                                   covariate_cols=cols)
        X, y = data.X, data.y
    else:
        # covariates only: the response column may be absent
        X, y = _read_covariates(args, theta, cols)
    if X.shape[1] != theta.p:
        raise UsageError(
            f"model expects {theta.p} covariate column(s), data has {X.shape[1]}")
    header = [f"x{j + 1}" for j in range(theta.p)]
    out_rows = []
    if args.mode == "classify":
        post = tasks.class_posteriors(X, theta)
        labels = np.argmax(post, axis=1) + 1
        header += [f"post_{k + 1}" for k in range(theta.K)] + ["label"]
        for i in range(X.shape[0]):
            out_rows.append(list(X[i]) + list(post[i]) + [int(labels[i])])
    elif args.mode == "cluster-posterior":
        from .model import responsibilities
        tau = responsibilities(data, theta)
        labels = np.argmax(tau, axis=1) + 1
        header += [f"post_{z + 1}" for z in range(theta.g)] + ["label"]
        for i in range(X.shape[0]):
            out_rows.append(list(X[i]) + list(tau[i]) + [int(labels[i])])
    elif args.mode == "cluster-gate":
        from .model import gate_log_probs
        gates = np.exp(gate_log_probs(X, theta.gating))
        labels = np.argmax(gates, axis=1) + 1
        header += [f"gate_{z + 1}" for z in range(theta.g)] + ["label"]
        for i in range(X.shape[0]):
            out_rows.append(list(X[i]) + list(gates[i]) + [int(labels[i])])
    elif args.mode == "mean":
        m = tasks.predict_mean_rows(X, theta)
        header += ["mean"]
        out_rows = [list(X[i]) + [m[i]] for i in range(X.shape[0])]
    elif args.mode == "variance":
        v = tasks.predict_variance_rows(X, theta)
        header += ["variance"]
        out_rows = [list(X[i]) + [v[i]] for i in range(X.shape[0])]
    else:  # mean-ci
        if "covariance" not in doc:
            raise UsageError(
                "mean-ci requires a model saved with --with-covariance")
        cov = np.asarray(doc["covariance"]["matrix"])
        header += ["mean", "lower", "upper"]
        for i in range(X.shape[0]):
            m = tasks.predict_mean(X[i], theta)
            lo, hi = mean_ci(X[i], theta, cov, args.level)
            out_rows.append(list(X[i]) + [m, lo, hi])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in out_rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v
                        for v in row])
    return 0


def _read_covariates(args, theta, cols):
    path = Path(args.data)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if cols is None:
        cols = [c for c in header if c not in (args.response_col, "z_true")]
    missing = [c for c in cols if c not in header]
    if missing:
        raise io.FormatError(f"{path}: missing covariate column(s) {missing} "
                             f"(found columns: {header})")
    xi = [header.index(c) for c in cols]
    X = np.array([[float(r[j]) for j in xi] for r in rows])
    return X, None


def cmd_summarize(args) -> int:
    theta, doc = io.load_model(args.model)
    print(f"family={theta.family}  g={theta.g}  p={theta.p}"
          + (f"  K={theta.K}" if theta.K else ""))
    print(f"expert design: {theta.design.kind}"
          + (f" (degree {theta.design.degree})" if theta.design.kind == "poly" else ""))
    if "fit" in doc:
        f = doc["fit"]
        print(f"logQL={f['logQL']:.6f}  dim={f['dim']}  bic={f['bic']:.6f}  "
              f"n={f['n']}  cycles={f['cycles']}  converged={f['converged']}  "
              f"degenerate={f['degenerate']}  seed={f['seed']}")
    if "covariance" in doc:
        cov = np.asarray(doc["covariance"]["matrix"])
        ses = np.sqrt(np.maximum(np.diag(cov), 0.0))
        for label, se in zip(doc["covariance"]["order"], ses):
            print(f"  se[{label}] = {se:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moefit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("what", choices=["three-class", "moe", "switch-signal"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None, help="model JSON for 'moe'")
    p.add_argument("--x-low", default="0.0")
    p.add_argument("--x-high", default="1.0")
    p.add_argument("--signal-spec", default=None,
                   help="JSON file with breakpoints/coefs/noise_sd")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model with a fixed g")
    _add_data_flags(p)
    p.add_argument("--family", required=True,
                   choices=["gaussian", "logistic", "poisson", "multinomial"])
    p.add_argument("--g", type=int, required=True)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--design", default="raw")
    p.add_argument("--out", required=True)
    p.add_argument("--with-covariance", action="store_true")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="select g by BIC over 1..G")
    _add_data_flags(p)
    p.add_argument("--family", required=True,
                   choices=["gaussian", "logistic", "poisson", "multinomial"])
    p.add_argument("--G", type=int, required=True)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--design", default="raw")
    p.add_argument("--out", required=True)
    p.add_argument("--table", default=None, help="per-g BIC table CSV path")
    p.add_argument("--with-covariance", action="store_true")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("predict", help="batch prediction from a fitted model")
    p.add_argument("--model", required=True)
    _add_data_flags(p)
    p.add_argument("--mode", required=True,
                   choices=["classify", "cluster-posterior", "cluster-gate",
                            "mean", "variance", "mean-ci"])
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("summarize", help="print a model file summary")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_summarize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    try:
        return args.func(args)
    except (UsageError, io.FormatError, ModelError, ValueError,
            FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationError, SelectionError, InferenceError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
