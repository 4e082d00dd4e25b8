"""Command-line entry point ``sparsevb``.

Subcommands: ``fit`` (regression on a CSV), ``tv`` (deblur an image), ``cv``
(k-fold RMSE), ``experiment`` (named experiment bundles) and
``fetch-diabetes``.  ``SPARSEVB_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .data import fetch_diabetes_csv, kfold_rmse, load_csv
from .experiments import (
    COEF_HEADER,
    EXPERIMENTS,
    TRACE_COLS,
    TUNERS,
    ExperimentConfig,
    ExperimentError,
    coefficient_rows,
    trace_rows,
    write_csv,
    run_experiment,
)
from .gig import PriorKind
from .hyper import TuneResult, tune_dirac_em, tune_interleaved, tune_nested
from .online import BatchPlan
from .tvop import read_image_csv, read_pgm
from .vbl import HyperParams, StoppingRule, vbl_iterate

__all__ = ["main", "build_parser", "prior_from_nu"]

THREADS_ENV = "SPARSEVB_THREADS"


def prior_from_nu(nu: str, gamma: float, lam: float, delta: float) -> HyperParams:
    """Map ``--nu {0|1|improper}`` to hyperparameters."""
    if nu == "1":
        return HyperParams(gamma**2, lam, delta, 1.0, PriorKind.LAPLACE_NU1)
    if nu == "0":
        return HyperParams(gamma**2, lam, delta, 0.0, PriorKind.INVGAUSS_NU0)
    if nu == "improper":
        return HyperParams(gamma**2, 0.0, delta, 0.0, PriorKind.JEFFREYS_IMPROPER)
    raise ValueError(f"unknown nu {nu!r}")


def _stop(args) -> StoppingRule:
    return StoppingRule(max_iter=args.max_iter, eps=args.eps, metric=args.metric)


def _add_model_args(p: argparse.ArgumentParser, tuner: bool = True) -> None:
    p.add_argument("--data", required=True, type=Path, help="CSV with a header row")
    p.add_argument("--label", required=True, help="name of the response column")
    p.add_argument("--scale", choices=("l2", "std"), default="l2", help="column scaling (default: unit L2 norm)")
    p.add_argument("--nu", choices=("0", "1", "improper"), default="1")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=None, help="noise std (default: std of the centered labels)")
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--eps", type=float, default=1e-10)
    p.add_argument("--metric", choices=("delta", "misfit"), default="delta")
    if tuner:
        p.add_argument("--tuner", choices=TUNERS, default="none")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsevb", description="Variational Bayesian LASSO tools")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a sparse linear regression to a CSV")
    _add_model_args(p)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("cv", help="k-fold cross-validated RMSE of the variational mean")
    _add_model_args(p, tuner=False)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="optional CSV with the result")

    p = sub.add_parser("tv", help="total-variation deblurring of a square image (PGM or image CSV)")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--omega", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--rho", type=float, default=None, help="keep blur modes above rho * gamma")
    mode.add_argument("--n-modes", type=int, default=None, help="keep about this many low modes")
    mode.add_argument("--online", action="store_true", help="stream pixel batches through the low-rank state")
    mode.add_argument("--dense", action="store_true", help="dense problem on every pixel (small images)")
    p.add_argument("--batch", type=int, default=1490, help="state size 2M for --online")
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("experiment", help="run a named experiment and write its artifact bundle")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=30, help="timing repetitions")
    p.add_argument("--tuner", choices=TUNERS, default="interleaved")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override an experiment parameter")

    p = sub.add_parser("fetch-diabetes", help="write the diabetes data as CSV (needs scikit-learn)")
    p.add_argument("--out", required=True, type=Path)
    return parser


def _parse_value(text: str):
    if text.lower() in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _overrides(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = _parse_value(val.strip())
    return out


def _cmd_fit(args) -> dict:
    ds = load_csv(args.data, args.label, scale=args.scale)
    gamma = args.gamma if args.gamma is not None else float(ds.Y.std())
    hp0 = prior_from_nu(args.nu, gamma, args.lam, args.delta)
    stop = _stop(args)
    if args.tuner == "interleaved":
        res = tune_interleaved(ds.X, ds.Y, hp0, stop)
    elif args.tuner == "nested":
        res = tune_nested(ds.X, ds.Y, hp0, stop)
    elif args.tuner == "dirac":
        res = tune_dirac_em(ds.X, ds.Y, hp0, stop, path="vbem")
    else:
        res = vbl_iterate(ds.X, ds.Y, hp0, None, stop)
    args.out.mkdir(parents=True, exist_ok=True)
    if isinstance(res, TuneResult):
        hp, fit = res.hp, res.fit
        res.trace.to_csv(args.out / "hyper_trace.csv")
    else:
        hp, fit = hp0, res
    write_csv(args.out / "coefficients.csv", COEF_HEADER, coefficient_rows(fit.triple, ds.names))
    write_csv(args.out / "trace.csv", TRACE_COLS, trace_rows(fit.trace, TRACE_COLS))
    summary = dict(n=ds.n, p=ds.p, gamma=hp.gamma, lam=hp.lam, iterations=fit.n_iter, converged=fit.converged)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _cmd_cv(args) -> dict:
    ds = load_csv(args.data, args.label, scale=args.scale)
    gamma = args.gamma if args.gamma is not None else float(ds.Y.std())
    hp = prior_from_nu(args.nu, gamma, args.lam, args.delta)
    rmse = kfold_rmse(ds, hp, k=args.folds, seed=args.seed, max_iter=args.max_iter)
    if args.out is not None:
        write_csv(args.out, ["gamma", "lambda", "folds", "seed", "rmse"], [(hp.gamma, hp.lam, args.folds, args.seed, rmse)])
    return dict(n=ds.n, folds=args.folds, seed=args.seed, rmse=rmse)


def _cmd_tv(args) -> dict:
    img = read_pgm(args.image) if args.image.suffix.lower() == ".pgm" else read_image_csv(args.image)
    p0 = img.shape[0]
    common = dict(omega=args.omega, gamma=args.gamma, lam=args.lam, image=str(args.image))
    stop = None
    if args.dense:
        name, params = "tv-toy", dict(common, p0=p0)
        if args.max_iter is not None:
            stop = StoppingRule(max_iter=args.max_iter, eps=1e-8, metric="delta")
    elif args.online:
        name, params = "tv-online", dict(common, p0=p0, batch=args.batch)
        if args.max_iter is not None:
            params["first_iter"] = args.max_iter
    else:
        name = "tv-truncated"
        params = dict(common, p0=p0, rho=args.rho if args.rho is not None else 0.8, n_modes=args.n_modes)
        if args.max_iter is not None:
            stop = StoppingRule(max_iter=args.max_iter, eps=1e-12, metric="delta")
    batch = BatchPlan(args.batch // 2, "strided", args.seed) if args.online else None
    cfg = ExperimentConfig(name, args.out, stop=stop, batch=batch, seed=args.seed, reps=1, params=params)
    return run_experiment(cfg).summary


def _cmd_experiment(args) -> dict:
    params = _overrides(args.set)
    cfg = ExperimentConfig(args.name, args.out, tuner=args.tuner, seed=args.seed, reps=args.reps, params=params)
    bundle = run_experiment(cfg)
    return dict(bundle.summary, config_hash=bundle.manifest["config_hash"], config_mismatch=bundle.manifest["config_mismatch"])


def _cmd_fetch(args) -> dict:
    path = fetch_diabetes_csv(args.out)
    return dict(path=str(path))


_COMMANDS = {
    "fit": _cmd_fit,
    "cv": _cmd_cv,
    "tv": _cmd_tv,
    "experiment": _cmd_experiment,
    "fetch-diabetes": _cmd_fetch,
}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    n = int(raw)
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            summary = _COMMANDS[args.command](args)
    except (ExperimentError, ValueError, OSError, RuntimeError) as exc:
        print(f"sparsevb {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
