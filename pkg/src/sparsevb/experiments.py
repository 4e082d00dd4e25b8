"""Experiment drivers that write plot-ready CSV tables, PGM images and a manifest.

Every experiment is a deterministic function of its configuration and input
files.  Wall-clock measurements go to ``timing.csv`` only, which is left out
of the manifest's output digests so reruns can be compared byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy
from numpy.typing import NDArray

from .data import TabularDataset, fetch_diabetes_csv, kfold_rmse, load_csv, validate_diabetes
from .hyper import TuneResult, tune_dirac_em, tune_interleaved, tune_nested
from .online import BatchPlan, make_batches, online_approx_step
from .tvop import (
    BlurSpec,
    TvOperator,
    blur_apply,
    blur_multiplier,
    fourier_truncate,
    read_image_csv,
    read_pgm,
    relative_error,
    shepp_logan,
    truncation_error,
    write_image_csv,
    write_pgm,
)
from .twod import DEFAULT_2D, Grid2D, mean_field_kl, posterior_grid
from .vbl import HyperParams, PosteriorTriple, StoppingRule, VBLResult, VBLTrace, credible_flags, vbl_iterate

__all__ = [
    "EXPERIMENTS",
    "TUNERS",
    "ExperimentConfig",
    "ExperimentError",
    "ArtifactBundle",
    "PhaseTimer",
    "run_experiment",
    "block_phantom",
    "tikhonov_path",
    "fit_tv_toy",
    "TvToyResult",
    "coefficient_rows",
    "trace_rows",
    "write_csv",
    "COEF_HEADER",
    "TRACE_COLS",
]

logger = logging.getLogger(__name__)

EXPERIMENTS = ("diabetes", "vbl-2d", "tv-toy", "tv-truncated", "tv-online")
TUNERS = ("none", "nested", "interleaved", "dirac")
TIMING_FILE = "timing.csv"
MANIFEST_FILE = "manifest.json"
MANIFEST_VERSION = 1

# per-experiment defaults, overridable through ``ExperimentConfig.params``
DEFAULT_PARAMS: dict[str, dict] = {
    "diabetes": dict(data=None, label="y", scale="l2", lam0=1.0, folds=5, cv_lambda=0.0041, cv_gamma=53.62, cv_iter=10),
    "vbl-2d": dict(lo=-4.0, hi=4.0, points=1000, contour_stride=10, perturb=1e-2, n_perturb=20),
    "tv-toy": dict(p0=28, omega=0.05, gamma=0.01, lam=10.0, image=None),
    "tv-truncated": dict(p0=256, omega=0.01, gamma=0.01, lam=1.0, rho=0.8, n_modes=None, image=None),
    "tv-online": dict(p0=256, omega=0.01, gamma=0.01, lam=1.0, batch=1490, first_iter=10, inner_iter=1, image=None),
}

DEFAULT_STOP: dict[str, StoppingRule] = {
    "diabetes": StoppingRule(max_iter=500, eps=1e-10, metric="delta"),
    "vbl-2d": StoppingRule(max_iter=10000, eps=1e-13, metric="delta"),
    "tv-toy": StoppingRule(max_iter=100, eps=1e-6, metric="delta"),
    "tv-truncated": StoppingRule(max_iter=10, eps=1e-12, metric="delta"),
    "tv-online": StoppingRule(max_iter=10, eps=1e-12, metric="delta"),
}


class ExperimentError(RuntimeError):
    """A module error raised inside an experiment, tagged with the experiment id."""

    def __init__(self, experiment: str, cause: BaseException):
        self.experiment = experiment
        super().__init__(f"experiment {experiment!r} failed: {type(cause).__name__}: {cause}")


@dataclass
class ExperimentConfig:
    """Everything an experiment depends on.

    ``params`` holds experiment-specific numbers and input paths; unset keys
    take the defaults in ``DEFAULT_PARAMS``.  ``hp=None`` lets the experiment
    choose its starting hyperparameters.  ``reps`` is the number of timing
    repetitions.
    """

    experiment: str
    out_dir: Path
    hp: HyperParams | None = None
    stop: StoppingRule | None = None
    batch: BatchPlan | None = None
    tuner: str = "interleaved"
    seed: int = 0
    reps: int = 30
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.tuner not in TUNERS:
            raise ValueError(f"unknown tuner {self.tuner!r}; choose from {TUNERS}")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        self.out_dir = Path(self.out_dir)
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.experiment])
        if unknown:
            raise ValueError(f"unknown parameters for {self.experiment}: {sorted(unknown)}")
        self.params = {**DEFAULT_PARAMS[self.experiment], **self.params}
        if self.stop is None:
            self.stop = DEFAULT_STOP[self.experiment]
        for key in ("data", "image"):
            path = self.params.get(key)
            if path is not None and not Path(path).is_file():
                raise FileNotFoundError(f"{key} file {path} does not exist")

    def to_dict(self) -> dict:
        params = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(self.params.items())}
        return dict(
            experiment=self.experiment,
            hp=None if self.hp is None else {k: _jsonable(v) for k, v in asdict(self.hp).items()},
            stop=asdict(self.stop),
            batch=None if self.batch is None else {k: _jsonable(v) for k, v in asdict(self.batch).items()},
            tuner=self.tuner,
            seed=self.seed,
            params=params,
        )

    def config_hash(self) -> str:
        """SHA-256 over every numeric and categorical setting (not the output directory or ``reps``)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def _jsonable(v):
    if hasattr(v, "value"):
        return v.value
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


@dataclass
class ArtifactBundle:
    out_dir: Path
    files: dict[str, Path]
    manifest: dict
    summary: dict


class PhaseTimer:
    """Wall-clock per phase; repeated phases report median and interquartile range."""

    def __init__(self):
        self.rows: list[tuple[str, int, float, float]] = []

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.rows.append((name, 1, time.perf_counter() - t0, 0.0))

    def repeat(self, name: str, fn: Callable[[], object], reps: int) -> tuple[float, float]:
        times = np.empty(reps)
        for r in range(reps):
            t0 = time.perf_counter()
            fn()
            times[r] = time.perf_counter() - t0
        q1, med, q3 = np.percentile(times, [25, 50, 75])
        self.rows.append((name, reps, float(med), float(q3 - q1)))
        return float(med), float(q3 - q1)

    def to_csv(self, path) -> None:
        write_csv(path, ["phase", "reps", "median_s", "iqr_s"], self.rows)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Outputs:
    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.files: dict[str, Path] = {}

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.files[name] = p
        return p

    def csv(self, name: str, header, rows) -> None:
        write_csv(self.path(name), header, rows)

    def image(self, stem: str, img: NDArray) -> None:
        write_pgm(self.path(stem + ".pgm"), img)
        write_image_csv(self.path(stem + ".csv"), img)


def run_experiment(cfg: ExperimentConfig) -> ArtifactBundle:
    """Run one experiment and write its artifact bundle into ``cfg.out_dir``.

    A manifest from an earlier run with a different configuration hash is
    reported through a warning and a ``config_mismatch`` entry.
    """
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = _Outputs(cfg.out_dir)
    timer = PhaseTimer()
    chash = cfg.config_hash()
    previous = _previous_hash(cfg.out_dir / MANIFEST_FILE)
    mismatch = previous is not None and previous != chash
    if mismatch:
        warnings.warn(f"{cfg.out_dir} holds results for config {previous[:12]}, now {chash[:12]}", stacklevel=2)
    try:
        summary = _RUNNERS[cfg.experiment](cfg, out, timer)
    except Exception as exc:
        raise ExperimentError(cfg.experiment, exc) from exc
    timer.to_csv(cfg.out_dir / TIMING_FILE)

    manifest = dict(
        version=MANIFEST_VERSION,
        experiment=cfg.experiment,
        config=cfg.to_dict(),
        config_hash=chash,
        previous_config_hash=previous,
        config_mismatch=mismatch,
        outputs={name: _sha256(p) for name, p in sorted(out.files.items())},
        timing=TIMING_FILE,
        summary=summary,
        versions=dict(numpy=np.__version__, scipy=scipy.__version__),
    )
    mpath = cfg.out_dir / MANIFEST_FILE
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    files = dict(out.files)
    files[TIMING_FILE] = cfg.out_dir / TIMING_FILE
    files[MANIFEST_FILE] = mpath
    return ArtifactBundle(cfg.out_dir, files, manifest, summary)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _previous_hash(path: Path) -> str | None:
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text()).get("config_hash")
    except (json.JSONDecodeError, AttributeError):
        return None


# --------------------------------------------------------------------------
# Shared output helpers


def coefficient_rows(triple: PosteriorTriple, names) -> list[tuple]:
    rep = credible_flags(triple)
    sd = triple.std
    return [
        (name, triple.mu[j], triple.m[j], sd[j], lo, hi, zero_in, flag)
        for j, (name, lo, hi, zero_in, flag) in enumerate(rep.rows(names))
    ]


COEF_HEADER = ["name", "mu", "m", "sd", "lower", "upper", "zero_inside", "flagged"]


def trace_rows(trace: VBLTrace, cols: list[str]) -> list[list]:
    return [[r.get(c, "") for c in cols] for r in trace.rows]


TRACE_COLS = ["iter", "misfit", "misfit_mu", "delta_m", "delta_mu", "delta_C", "gamma_sq", "lam"]


# --------------------------------------------------------------------------
# Diabetes regression


def _tune(cfg: ExperimentConfig, X: NDArray, Y: NDArray, hp0: HyperParams) -> TuneResult | VBLResult:
    if cfg.tuner == "interleaved":
        return tune_interleaved(X, Y, hp0, cfg.stop)
    if cfg.tuner == "nested":
        return tune_nested(X, Y, hp0, cfg.stop)
    if cfg.tuner == "dirac":
        return tune_dirac_em(X, Y, hp0, cfg.stop, path="vbem")
    return vbl_iterate(X, Y, hp0, None, cfg.stop)


def _load_diabetes(cfg: ExperimentConfig, out: _Outputs) -> TabularDataset:
    p = cfg.params
    path = p["data"]
    if path is None:
        path = fetch_diabetes_csv(out.path("diabetes.csv"))
    ds = load_csv(path, p["label"], scale=p["scale"])
    validate_diabetes(ds)
    return ds


def _run_diabetes(cfg: ExperimentConfig, out: _Outputs, timer: PhaseTimer) -> dict:
    p = cfg.params
    with timer.phase("load"):
        ds = _load_diabetes(cfg, out)
    hp0 = cfg.hp or HyperParams(gamma_sq=float(np.var(ds.Y)), lam=p["lam0"])
    with timer.phase("tune"):
        res = _tune(cfg, ds.X, ds.Y, hp0)
    if isinstance(res, TuneResult):
        hp, fit = res.hp, res.fit
        res.trace.to_csv(out.path("hyper_trace.csv"))
    else:
        hp, fit = hp0, res
    out.csv("coefficients.csv", COEF_HEADER, coefficient_rows(fit.triple, ds.names))
    out.csv("trace.csv", TRACE_COLS, trace_rows(fit.trace, TRACE_COLS))

    hp_ref = hp.with_(gamma_sq=p["cv_gamma"] ** 2, lam=p["cv_lambda"])
    cv_rows = []
    with timer.phase("cv"):
        for label, h in (("tuned", hp), ("reference", hp_ref)):
            rmse = kfold_rmse(ds, h, k=p["folds"], seed=cfg.seed, max_iter=p["cv_iter"])
            cv_rows.append((label, h.gamma, h.lam, p["folds"], cfg.seed, rmse))
    out.csv("cv.csv", ["setting", "gamma", "lambda", "folds", "seed", "rmse"], cv_rows)

    single = cfg.stop
    med, iqr = timer.repeat("single_vbem_fit", lambda: vbl_iterate(ds.X, ds.Y, hp, None, single, track=False), cfg.reps)
    return dict(
        n=ds.n,
        p=ds.p,
        gamma=hp.gamma,
        lam=hp.lam,
        iterations=fit.n_iter,
        rmse_tuned=cv_rows[0][-1],
        rmse_reference=cv_rows[1][-1],
        fit_median_s=med,
        fit_iqr_s=iqr,
    )


# --------------------------------------------------------------------------
# Two-coefficient quadrature check


def _run_vbl_2d(cfg: ExperimentConfig, out: _Outputs, timer: PhaseTimer) -> dict:
    p = cfg.params
    X, Y = DEFAULT_2D["X"], DEFAULT_2D["Y"]
    hp = cfg.hp or DEFAULT_2D["hp"]
    grid = Grid2D(p["lo"], p["hi"], p["points"])
    with timer.phase("fit"):
        fit = vbl_iterate(X, Y, hp, None, cfg.stop)
    tri = fit.triple
    with timer.phase("quadrature"):
        post = posterior_grid(X, Y, hp, grid)
        q2 = tri.C_diag + tri.m**2
        kl = mean_field_kl(X, Y, hp, tri.m, tri.C, q2, post)
        rng = np.random.default_rng(cfg.seed)
        kl_pert = []
        for _ in range(p["n_perturb"]):
            d = rng.normal(size=2)
            m2 = tri.m + p["perturb"] * d / np.linalg.norm(d)
            kl_pert.append(mean_field_kl(X, Y, hp, m2, tri.C, tri.C_diag + m2**2, post))
    arg, mean, cov = post.argmax(), post.mean(), post.cov()

    s = p["contour_stride"]
    B1, B2 = grid.mesh()
    Ci = np.linalg.inv(tri.C)
    d1, d2 = B1 - tri.m[0], B2 - tri.m[1]
    logq = -0.5 * (Ci[0, 0] * d1 * d1 + 2 * Ci[0, 1] * d1 * d2 + Ci[1, 1] * d2 * d2)
    logq -= math.log(2 * math.pi) + 0.5 * np.linalg.slogdet(tri.C)[1]
    logpost = post.log_density - post.log_evidence
    sl = (slice(None, None, s), slice(None, None, s))
    out.csv(
        "contour.csv",
        ["b1", "b2", "log_posterior", "log_q"],
        zip(B1[sl].ravel(), B2[sl].ravel(), logpost[sl].ravel(), logq[sl].ravel()),
    )
    rows = [
        ("mu1_vs_argmax", tri.mu[0], arg[0]),
        ("mu2_vs_argmax", tri.mu[1], arg[1]),
        ("m1_vs_mean", tri.m[0], mean[0]),
        ("m2_vs_mean", tri.m[1], mean[1]),
        ("C11_vs_cov", tri.C[0, 0], cov[0, 0]),
        ("C12_vs_cov", tri.C[0, 1], cov[0, 1]),
        ("C22_vs_cov", tri.C[1, 1], cov[1, 1]),
    ]
    out.csv(
        "oracle.csv",
        ["quantity", "vbl", "quadrature", "difference"],
        [(name, a, b, a - b) for name, a, b in rows]
        + [("kl", kl, float("nan"), float("nan")), ("min_perturbed_kl", min(kl_pert), kl, min(kl_pert) - kl)],
    )
    out.csv("trace.csv", TRACE_COLS + ["elbo"], trace_rows(fit.trace, TRACE_COLS + ["elbo"]))
    return dict(
        iterations=fit.n_iter,
        cell=grid.cell,
        mu_argmax_distance=float(np.max(np.abs(tri.mu - arg))),
        kl=kl,
        min_perturbed_kl=min(kl_pert),
    )


# --------------------------------------------------------------------------
# Total-variation deblurring


def block_phantom(p0: int = 28) -> NDArray:
    """Piecewise-constant test image: a bright square and a dimmer disc."""
    img = np.zeros((p0, p0))
    s = p0 / 28.0
    img[int(5 * s) : int(13 * s), int(4 * s) : int(12 * s)] = 1.0
    yy, xx = np.mgrid[:p0, :p0]
    img[(yy - 18 * s) ** 2 + (xx - 17 * s) ** 2 <= (5 * s) ** 2] = 0.5
    return img


def _load_image(path) -> NDArray:
    path = Path(path)
    img = read_pgm(path) if path.suffix.lower() == ".pgm" else read_image_csv(path)
    return img


def _noisy_data(img: NDArray, omega: float, gamma: float, seed: int) -> NDArray:
    rng = np.random.default_rng(seed)
    return blur_apply(img, omega).ravel() + gamma * rng.normal(size=img.size)


def tikhonov_path(Y: NDArray, p0: int, omega: float, alphas: NDArray) -> list[NDArray]:
    """Image-domain ridge reconstructions ``(B^T B + alpha I)^{-1} B^T Y`` by FFT."""
    b = blur_multiplier(p0, omega)
    FY = np.fft.fft2(np.asarray(Y, dtype=float).reshape(p0, p0))
    return [np.fft.ifft2(FY * b / (b * b + a)).real for a in alphas]


TIKHONOV_ALPHAS = np.logspace(-8, 1, 91)


def _tv_maps(op: TvOperator, tri: PosteriorTriple) -> dict[str, NDArray]:
    pt, s = op.pt, (op.p0, op.p0)
    maps = dict(
        mean=op.image_from_coords(tri.m),
        map=op.image_from_coords(tri.mu),
        grad_norm=np.hypot(tri.m[:pt], tri.m[pt : 2 * pt]).reshape(s),
    )
    if tri.C_diag is not None:
        maps["grad_std"] = np.sqrt(tri.C_diag[:pt] + tri.C_diag[pt : 2 * pt]).reshape(s)
    return maps


@dataclass
class TvToyResult:
    truth: NDArray
    data: NDArray
    fit: VBLResult
    op: TvOperator
    tikhonov: list[tuple[float, float]]  # (alpha, relative error)
    err_m: NDArray
    err_mu: NDArray

    @property
    def tikhonov_best(self) -> tuple[float, float]:
        return min(self.tikhonov, key=lambda r: r[1])


def fit_tv_toy(
    p0: int = 28,
    omega: float = 0.05,
    gamma: float = 0.01,
    lam: float = 10.0,
    stop: StoppingRule | None = None,
    seed: int = 0,
    image: NDArray | None = None,
) -> TvToyResult:
    """Dense TV deblurring of a small image with the Tikhonov path alongside."""
    truth = block_phantom(p0) if image is None else np.asarray(image, dtype=float)
    p0 = truth.shape[0]
    stop = stop or DEFAULT_STOP["tv-toy"]
    Y = _noisy_data(truth, omega, gamma, seed)
    op = TvOperator(BlurSpec(p0, omega, gamma))
    X = op.matrix()
    err_m, err_mu = [], []

    def cb(t, tri):
        err_m.append(relative_error(op.image_from_coords(tri.m), truth))
        err_mu.append(relative_error(op.image_from_coords(tri.mu), truth))
        return dict(err_m=err_m[-1], err_mu=err_mu[-1])

    fit = vbl_iterate(X, Y, HyperParams(gamma**2, lam), None, stop, callback=cb, track=False)
    tik = [(float(a), relative_error(img, truth)) for a, img in zip(TIKHONOV_ALPHAS, tikhonov_path(Y, p0, omega, TIKHONOV_ALPHAS))]
    return TvToyResult(truth, Y.reshape(p0, p0), fit, op, tik, np.array(err_m), np.array(err_mu))


TV_TRACE_COLS = ["iter", "misfit", "misfit_mu", "err_m", "err_mu", "delta_m", "delta_mu"]


def _run_tv_toy(cfg: ExperimentConfig, out: _Outputs, timer: PhaseTimer) -> dict:
    p = cfg.params
    image = None if p["image"] is None else _load_image(p["image"])
    lam = cfg.hp.lam if cfg.hp is not None else p["lam"]
    with timer.phase("fit"):
        res = fit_tv_toy(p["p0"], p["omega"], p["gamma"], lam, cfg.stop, cfg.seed, image)
    out.csv("trace.csv", TV_TRACE_COLS, trace_rows(res.fit.trace, TV_TRACE_COLS))
    out.csv("tikhonov_path.csv", ["alpha", "rel_error"], res.tikhonov)
    a_best, e_best = res.tikhonov_best
    out.image("truth", res.truth)
    out.image("data", res.data)
    out.image("tikhonov", tikhonov_path(res.data, res.truth.shape[0], p["omega"], [a_best])[0])
    for name, img in _tv_maps(res.op, res.fit.triple).items():
        out.image(name, img)
    n = res.truth.size
    return dict(
        iterations=res.fit.n_iter,
        err_m=float(res.err_m[-1]),
        err_mu=float(res.err_mu[-1]),
        best_err_mu=float(res.err_mu.min()),
        best_iter_mu=int(np.argmin(res.err_mu)) + 1,
        tikhonov_err=e_best,
        tikhonov_alpha=a_best,
        final_misfit=float(res.fit.trace.column("misfit")[-1]),
        noise_level=p["gamma"] * math.sqrt(n),
    )


def _tv_problem(cfg: ExperimentConfig):
    p = cfg.params
    truth = shepp_logan(p["p0"]) if p["image"] is None else _load_image(p["image"])
    p0 = truth.shape[0]
    Y = _noisy_data(truth, p["omega"], p["gamma"], cfg.seed)
    spec = BlurSpec(p0, p["omega"], p["gamma"])
    lam = cfg.hp.lam if cfg.hp is not None else p["lam"]
    return truth, Y, spec, TvOperator(spec), HyperParams(p["gamma"] ** 2, lam)


def _run_tv_truncated(cfg: ExperimentConfig, out: _Outputs, timer: PhaseTimer) -> dict:
    p = cfg.params
    truth, Y, spec, op, hp = _tv_problem(cfg)
    with timer.phase("truncate"):
        if p["n_modes"] is not None:
            trunc = fourier_truncate(spec, n_modes=p["n_modes"])
        else:
            trunc = fourier_truncate(spec, rho=p["rho"])
        R = trunc.design_rows(op)
        Yr = trunc.reduced_data(Y)
    t_err = truncation_error(truth, spec, trunc)

    def cb(t, tri):
        em = relative_error(op.image_from_coords(tri.m), truth)
        eu = relative_error(op.image_from_coords(tri.mu), truth)
        logger.info("iteration %d: error m %.4f mu %.4f", t, em, eu)
        return dict(err_m=em, err_mu=eu)

    with timer.phase("fit"):
        fit = vbl_iterate(R, Yr, hp, None, cfg.stop, form="dual", cov="diag", track=False, callback=cb)
    del R
    out.csv("trace.csv", TV_TRACE_COLS, trace_rows(fit.trace, TV_TRACE_COLS))
    out.csv("modes.csv", ["k1", "k2", "kind", "factor"], [(*map(int, m), f) for m, f in zip(trunc.modes, trunc.factors)])
    out.image("truth", truth)
    out.image("data", Y.reshape(spec.p0, spec.p0))
    for name, img in _tv_maps(op, fit.triple).items():
        out.image(name, img)
    last = fit.trace.rows[-1]
    return dict(
        n_tilde=trunc.n_tilde,
        threshold=trunc.threshold,
        truncation_error=t_err,
        iterations=fit.n_iter,
        err_m=last["err_m"],
        err_mu=last["err_mu"],
    )


def _run_tv_online(cfg: ExperimentConfig, out: _Outputs, timer: PhaseTimer) -> dict:
    p = cfg.params
    truth, Y, spec, op, hp = _tv_problem(cfg)
    M = p["batch"] // 2
    plan = cfg.batch or BatchPlan(M, "strided", cfg.seed)
    if plan.batch_size != M:
        raise ValueError(f"batch plan size {plan.batch_size} does not match 2M = {p['batch']}")
    batches = make_batches(spec.n, plan)
    state = None
    rows = []
    t0 = time.perf_counter()
    for b in batches:
        first = state is None
        rule = StoppingRule(max_iter=p["first_iter"] if first else p["inner_iter"], eps=cfg.stop.eps, metric=cfg.stop.metric)
        Xb = op.rows(b)
        state, tri = online_approx_step(state, Xb, Y[b], hp, rule, M=M)
        del Xb
        em = relative_error(op.image_from_coords(tri.m), truth)
        eu = relative_error(op.image_from_coords(tri.mu), truth)
        logger.info("batch %d/%d: error m %.4f mu %.4f", state.batch_index, len(batches), em, eu)
        rows.append((state.batch_index, state.n_seen, em, eu, state.tails[-1], state.frob_errors[-1]))
    timer.rows.append(("online", len(batches), (time.perf_counter() - t0) / len(batches), 0.0))
    out.csv("trace.csv", ["batch", "n_seen", "err_m", "err_mu", "tail", "frob_error"], rows)
    out.image("truth", truth)
    out.image("data", Y.reshape(spec.p0, spec.p0))
    for name, img in _tv_maps(op, state.view()).items():
        out.image(name, img)
    pair = rows[1] if len(rows) > 1 else rows[0]
    return dict(
        batches=len(batches),
        M=M,
        err_m_pair=pair[2],
        err_mu_pair=pair[3],
        err_m=rows[-1][2],
        err_mu=rows[-1][3],
    )


_RUNNERS = {
    "diabetes": _run_diabetes,
    "vbl-2d": _run_vbl_2d,
    "tv-toy": _run_tv_toy,
    "tv-truncated": _run_tv_truncated,
    "tv-online": _run_tv_online,
}
