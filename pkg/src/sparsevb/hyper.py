"""Learning the noise variance ``gamma^2`` and the sparsity scale ``lambda``.

Three tuners are provided:

* nested: run the coupled iteration to convergence, then take one EM step on
  ``(gamma^2, lambda)`` against the converged variational factor; repeat;
* interleaved (the default): the same M-step after every single iteration;
* Dirac: treat ``(gamma^2, lambda)`` as a point-mass factor of the
  variational family and maximize the expected complete log joint.  This
  uses ``E[theta]`` rather than ``E[1/theta]`` and runs on either path.

``delta`` is never tuned.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize_scalar

from .gaussian import SufficientStats
from .gig import GigParams, PriorKind, cond_inv_theta
from .vbl import (
    FULL_COV_LIMIT,
    HyperParams,
    IterState,
    PosteriorTriple,
    StoppingRule,
    VBLResult,
    free_energy,
    vbl_iterate,
)

logger = logging.getLogger(__name__)

__all__ = [
    "GAMMA_SQ_FLOOR",
    "EULER_GAMMA",
    "ClampWarning",
    "PathDivergenceWarning",
    "DegenerateUpdateError",
    "gamma_sq_update",
    "gamma_sq_objective",
    "lambda_update",
    "lambda_objective",
    "product_log",
    "dirac_lambda_update",
    "HyperTrace",
    "interleaved_hook",
    "dirac_hook",
    "combine_hooks",
    "tune_interleaved",
    "tune_nested",
    "tune_dirac_em",
    "TuneResult",
]

GAMMA_SQ_FLOOR = 1e-12
EULER_GAMMA = 0.5772156649015329
COLD_SKIP = 2


class ClampWarning(RuntimeWarning):
    """``gamma^2`` came out nonpositive and was clamped."""


class PathDivergenceWarning(RuntimeWarning):
    """The EM and VBEM paths settled on very different hyperparameters."""


class DegenerateUpdateError(ArithmeticError):
    """A closed-form update has no valid solution; keep the previous value."""

    def __init__(self, msg: str, previous: float | None = None):
        self.previous = previous
        super().__init__(msg)


# --------------------------------------------------------------------------
# gamma^2


def _tr_AC(A: NDArray, C: NDArray | None) -> float:
    if C is None:
        return 0.0
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        return float(np.diag(A) @ C)
    return float(np.sum(A * C))


def gamma_sq_update(
    stats: SufficientStats | None = None,
    m: NDArray | None = None,
    C: NDArray | None = None,
    *,
    X: NDArray | None = None,
    Y: NDArray | None = None,
    tr_XCX: float | None = None,
) -> float:
    """Maximizer of the expected log likelihood in ``gamma^2``.

    ``(s - 2 v^T m + tr[A (C + m m^T)]) / n`` from the statistics, or
    ``(|Y - X m|^2 + tr[X C X^T]) / n`` from the data when ``X`` and ``Y``
    are given (cheaper for ``n < p``).  ``C`` may be a full covariance, a
    diagonal (only exact when the covariance really is diagonal), or
    ``None`` for a point estimate; ``tr_XCX`` overrides ``C`` on the data
    form.  A nonpositive result is clamped to ``1e-12`` with a
    :class:`ClampWarning`.
    """
    m = np.asarray(m, dtype=float)
    if X is not None:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.asarray(Y, dtype=float).ravel()
        n = X.shape[0]
        if n < 1:
            raise ValueError("need at least one observation")
        r = Y - X @ m
        if tr_XCX is None:
            if C is None:
                tr_XCX = 0.0
            elif np.ndim(C) == 1:
                tr_XCX = float(np.sum(X * X * C))
            else:
                tr_XCX = float(np.sum((X @ C) * X))
        val = (float(r @ r) + tr_XCX) / n
    else:
        if stats is None or stats.count < 1:
            raise ValueError("need at least one observation")
        A, v, s, n = stats.A, stats.v, stats.s, stats.count
        val = (s - 2.0 * v @ m + m @ A @ m + _tr_AC(A, C)) / n
    if not val > GAMMA_SQ_FLOOR:
        warnings.warn(f"gamma^2 update {val:.3e} clamped to {GAMMA_SQ_FLOOR}", ClampWarning, stacklevel=2)
        val = GAMMA_SQ_FLOOR
    return float(val)


def gamma_sq_objective(gamma_sq: float, n: int, expected_sq_resid: float) -> float:
    """``n log(gamma) + E|Y - X beta|^2 / (2 gamma^2)`` (to be minimized)."""
    return 0.5 * n * math.log(gamma_sq) + 0.5 * expected_sq_resid / gamma_sq


# --------------------------------------------------------------------------
# lambda


def _second_moment(m: NDArray, C_diag: NDArray | None) -> NDArray:
    m = np.asarray(m, dtype=float)
    if C_diag is None:
        return m**2
    C_diag = np.asarray(C_diag, dtype=float)
    if np.any(C_diag < 0):
        raise ValueError("C_diag must be nonnegative")
    return C_diag + m**2


def _inv_theta_at(lam: float, e: NDArray, hp: HyperParams) -> NDArray:
    if hp.kind.improper:
        # lambda plays the role of 1 - 2 nu
        return lam / (hp.delta**2 + e)
    return np.atleast_1d(cond_inv_theta(GigParams(hp.nu, hp.delta, lam, hp.kind), e))


def lambda_objective(lam: float, m: NDArray, C_diag: NDArray | None, hp: HyperParams) -> float:
    """``sum_j E[beta_j^2] w_j(lambda) - log w_j(lambda)`` with ``w = E[1/theta]``.

    Minimized by :func:`lambda_update`.
    """
    e = _second_moment(m, C_diag)
    w = _inv_theta_at(lam, e, hp)
    return float(np.sum(e * w - np.log(w)))


def lambda_update(m: NDArray, C_diag: NDArray | None, hp: HyperParams, previous: float | None = None) -> float:
    """M-step for ``lambda`` given the variational second moments.

    * ``nu = 1``: ``1/lambda = mean(e / sqrt(delta^2 + e))``;
    * ``nu = 0``: ``1/lambda = sum(e / sqrt(delta^2 + e)) / (p - sum(e / (delta^2 + e)))``;
    * improper power prior (``lambda`` standing for ``1 - 2 nu``):
      ``1/lambda = mean(e / (delta^2 + e))``, so ``lambda = 1`` when ``delta = 0``;
    * general ``nu``: 1-D numerical minimization of :func:`lambda_objective`;
    * Gaussian prior: ``lambda = p / sum(e)`` (the prior precision MLE).

    ``e = C_jj + m_j^2``; pass ``C_diag=None`` for a point estimate.
    """
    e = _second_moment(m, C_diag)
    p = e.size
    d2 = hp.delta**2
    kind = hp.kind
    if kind is PriorKind.LAPLACE_NU1:
        inv = np.mean(e / np.sqrt(d2 + e))
    elif kind is PriorKind.INVGAUSS_NU0:
        ratio = e / (d2 + e) if d2 > 0 else np.ones_like(e)
        denom = p - float(np.sum(ratio))
        if not denom > 0:
            raise DegenerateUpdateError("nu = 0 lambda update has a nonpositive denominator", previous)
        inv = float(np.sum(e / np.sqrt(d2 + e))) / denom
    elif kind.improper:
        if np.any(d2 + e == 0):
            raise DegenerateUpdateError("improper lambda update needs delta^2 + e > 0", previous)
        inv = np.mean(e / (d2 + e))
    elif kind is PriorKind.GAUSSIAN:
        inv = np.mean(e)
    else:
        return _lambda_search(m, C_diag, hp, previous)
    if not inv > 0:
        raise DegenerateUpdateError("lambda update gives 1/lambda <= 0", previous)
    return float(1.0 / inv)


def _lambda_search(m: NDArray, C_diag: NDArray | None, hp: HyperParams, previous: float | None) -> float:
    # coarse scan in log(lambda), then bounded refinement around the best node
    def f(t: float) -> float:
        with np.errstate(all="ignore"):
            try:
                v = lambda_objective(math.exp(t), m, C_diag, hp)
            except (OverflowError, ValueError, ArithmeticError):
                return math.inf
        return v if math.isfinite(v) else math.inf

    grid = np.arange(-30.0, 30.5, 1.0)
    vals = np.array([f(t) for t in grid])
    k = int(np.argmin(vals))
    if not math.isfinite(vals[k]):
        raise DegenerateUpdateError("lambda objective is not finite on the search grid", previous)
    if k == 0 or k == grid.size - 1:
        raise DegenerateUpdateError("lambda objective has no interior minimizer", previous)
    res = minimize_scalar(f, bounds=(grid[k - 1], grid[k + 1]), method="bounded", options={"xatol": 1e-12})
    return float(math.exp(res.x))


# --------------------------------------------------------------------------
# Dirac (point-mass) hyperparameter factor


def _w_initial(z: float, branch: int) -> float:
    q = math.sqrt(max(2.0 * (math.e * z + 1.0), 0.0))
    if branch == 0:
        if z < -0.25:
            return -1.0 + q - q * q / 3.0
        return math.log1p(z) if z < 3.0 else math.log(z) - math.log(math.log(z))
    if z < -0.25:
        return -1.0 - q - q * q / 3.0
    L1 = math.log(-z)
    return L1 - math.log(-L1)


def product_log(z: float, branch: int = 0, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Lambert ``W``: solves ``w exp(w) = z`` by Newton iteration.

    ``branch=0`` is the principal branch (``z >= -1/e``); ``branch=-1`` the
    lower branch on ``[-1/e, 0)``.  Stops when ``|w e^w - z| <= tol |z|``.
    """
    zmin = -1.0 / math.e
    if branch not in (0, -1):
        raise ValueError("branch must be 0 or -1")
    if z < zmin - 1e-15 or (branch == -1 and z >= 0):
        raise DegenerateUpdateError(f"product log argument {z} outside the domain of branch {branch}")
    if z <= zmin:
        return -1.0
    if branch == 0 and z == 0.0:
        return 0.0
    w = _w_initial(z, branch)
    target = tol * abs(z)
    for _ in range(max_iter):
        ew = math.exp(w)
        f = w * ew - z
        if abs(f) <= target:
            return w
        fp = ew * (w + 1.0)
        if fp == 0.0:
            break
        step = f / fp
        w_new = w - step
        # stay on the requested side of the branch point
        if branch == 0 and w_new < -1.0:
            w_new = 0.5 * (w - 1.0)
        elif branch == -1 and w_new > -1.0:
            w_new = 0.5 * (w - 1.0)
        w = w_new
    ew = math.exp(w)
    if abs(w * ew - z) <= 1e3 * target:
        return w
    raise DegenerateUpdateError(f"product log Newton iteration did not converge for z={z}")


def dirac_lambda_update(beta_sq: NDArray, hp: HyperParams) -> float:
    """Point-mass M-step for ``lambda`` using ``E[theta]`` at the current ``lambda``.

    ``beta_sq`` is ``mu^2`` on the EM path or ``C_jj + m_j^2`` on the VBEM
    path.  For ``nu = 1`` (``O(delta)`` term dropped)::

        lambda' = lambda / sqrt(1 + lambda^2 tr(D^{-1}) / p),   D = diag(lambda / sqrt(delta^2 + beta^2))

    For ``nu = 0`` the small-argument form of ``log K_0`` gives
    ``lambda' = (2/delta) exp(-Gamma + W_{-1}(z)/2)`` with
    ``z = -p delta^2 exp(2 Gamma) / (2 F)``, ``F = sum sqrt(delta^2 + beta^2) / lambda``.
    """
    beta_sq = np.asarray(beta_sq, dtype=float)
    p = beta_sq.size
    lam = hp.lam
    root = np.sqrt(hp.delta**2 + beta_sq)
    if hp.kind is PriorKind.LAPLACE_NU1:
        tr_Dinv = float(np.sum(root)) / lam
        return float(lam / math.sqrt(1.0 + lam**2 * tr_Dinv / p))
    if hp.kind is PriorKind.INVGAUSS_NU0:
        if hp.delta <= 0:
            raise DegenerateUpdateError("nu = 0 Dirac update needs delta > 0", lam)
        F = float(np.sum(root)) / lam
        z = -p * hp.delta**2 * math.exp(2.0 * EULER_GAMMA) / (2.0 * F)
        try:
            w = product_log(z, branch=-1)
        except DegenerateUpdateError as exc:
            raise DegenerateUpdateError(str(exc), lam) from exc
        return float((2.0 / hp.delta) * math.exp(-EULER_GAMMA + 0.5 * w))
    raise ValueError(f"Dirac update is defined for nu in {{0, 1}}, got {hp.kind}")


# --------------------------------------------------------------------------
# Traces and hooks


@dataclass
class HyperTrace:
    rows: list[dict] = field(default_factory=list)

    def append(self, tau: int, gamma_sq: float, lam: float, objective: float = float("nan"), path: str = "vbem"):
        if not gamma_sq > 0 or not lam >= 0:
            raise ValueError(f"invalid hyperparameters gamma^2={gamma_sq}, lambda={lam}")
        self.rows.append(dict(tau=tau, gamma_sq=gamma_sq, lam=lam, objective=objective, path=path))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str, path: str | None = None) -> NDArray:
        return np.array([r[name] for r in self.rows if path is None or r["path"] == path], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "gamma", "lambda", "objective", "path"])
            for r in self.rows:
                w.writerow([r["tau"], repr(math.sqrt(r["gamma_sq"])), repr(float(r["lam"])), repr(float(r["objective"])), r["path"]])


def _expected_sq_resid(st: IterState, path: str) -> float:
    if path == "em":
        return st.sq_misfit_mu
    if math.isfinite(st.tr_XCX):
        return st.sq_misfit + st.tr_XCX
    return st.sq_misfit + _tr_AC(st.system.stats.A, st.triple.C)


def _free_energy(st: IterState, hp: HyperParams) -> float:
    tr = st.triple
    if not math.isfinite(st.logdet_C):
        return float("nan")
    return free_energy(hp, st.system.n, st.sq_misfit, st.tr_XCX, st.logdet_C, tr.C_diag + tr.m**2, st.q_beta_sq)


def _skip(st: IterState, K: int) -> bool:
    return st.cold and st.t <= K


def interleaved_hook(trace: HyperTrace, K: int = COLD_SKIP, tune_gamma: bool = True, couple_em: bool = True):
    """Hook for ``vbl_iterate``: one M-step on the VBEM factor per iteration.

    With ``couple_em`` the EM path receives the same hyperparameters.
    """

    def hook(st: IterState):
        if _skip(st, K):
            return st.hp, st.hp_em
        hp = st.hp
        g2 = _expected_sq_resid(st, "vbem") / st.system.n if tune_gamma else hp.gamma_sq
        if tune_gamma and not g2 > GAMMA_SQ_FLOOR:
            warnings.warn("gamma^2 update clamped", ClampWarning, stacklevel=2)
            g2 = GAMMA_SQ_FLOOR
        try:
            lam = lambda_update(st.triple.m, st.triple.C_diag, hp, previous=hp.lam)
        except DegenerateUpdateError as exc:
            logger.warning("%s; keeping lambda=%g", exc, hp.lam)
            lam = hp.lam
        hp = hp.with_(gamma_sq=g2, lam=lam)
        trace.append(st.t, hp.gamma_sq, hp.lam, _free_energy(st, hp), "vbem")
        return hp, (hp if couple_em else st.hp_em)

    return hook


def dirac_hook(trace: HyperTrace, path: str = "em", K: int = COLD_SKIP, tune_gamma: bool = True):
    """Hook applying the point-mass updates to one path (``'em'`` or ``'vbem'``)."""
    if path not in ("em", "vbem"):
        raise ValueError("path must be 'em' or 'vbem'")

    def hook(st: IterState):
        if _skip(st, K):
            return st.hp, st.hp_em
        hp = st.hp_em if path == "em" else st.hp
        tr = st.triple
        beta_sq = tr.mu**2 if path == "em" else tr.C_diag + tr.m**2
        try:
            lam = dirac_lambda_update(beta_sq, hp)
        except DegenerateUpdateError as exc:
            logger.warning("%s; keeping lambda=%g", exc, hp.lam)
            lam = hp.lam
        g2 = _expected_sq_resid(st, path) / st.system.n if tune_gamma else hp.gamma_sq
        if not g2 > GAMMA_SQ_FLOOR:
            warnings.warn("gamma^2 update clamped", ClampWarning, stacklevel=2)
            g2 = GAMMA_SQ_FLOOR
        new = hp.with_(gamma_sq=g2, lam=lam)
        trace.append(st.t, new.gamma_sq, new.lam, float("nan"), path)
        return (st.hp, new) if path == "em" else (new, st.hp_em)

    return hook


def combine_hooks(vbem_hook, em_hook):
    """Run ``vbem_hook`` for the VBEM hyperparameters and ``em_hook`` for the EM ones."""

    def hook(st: IterState):
        hp, _ = vbem_hook(st)
        _, hp_em = em_hook(st)
        return hp, hp_em

    return hook


def _check_divergence(hp: HyperParams, hp_em: HyperParams, factor: float = 2.0) -> None:
    for name, a, b in (("lambda", hp.lam, hp_em.lam), ("gamma^2", hp.gamma_sq, hp_em.gamma_sq)):
        if a > 0 and b > 0 and max(a / b, b / a) > factor:
            warnings.warn(
                f"EM and VBEM paths disagree on {name}: {b:.4g} vs {a:.4g}", PathDivergenceWarning, stacklevel=3
            )


# --------------------------------------------------------------------------
# Tuners


@dataclass
class TuneResult:
    hp: HyperParams
    hp_em: HyperParams
    trace: HyperTrace
    fit: VBLResult

    def __iter__(self):
        return iter((self.hp, self.trace))


def tune_interleaved(
    X: NDArray,
    Y: NDArray,
    hp0: HyperParams,
    stop: StoppingRule | None = None,
    *,
    K: int = COLD_SKIP,
    em_tuner: str | None = None,
    form: str = "auto",
    cov: str = "full",
) -> TuneResult:
    """One hyperparameter M-step after every VBEM iteration (default tuner).

    ``em_tuner='dirac'`` tunes the EM path separately with the point-mass
    update; otherwise it shares the VBEM hyperparameters.
    """
    stop = StoppingRule(max_iter=500, metric="delta", eps=1e-10) if stop is None else stop
    trace = HyperTrace()
    hook = interleaved_hook(trace, K, couple_em=em_tuner is None)
    if em_tuner == "dirac":
        hook = combine_hooks(hook, dirac_hook(trace, "em", K))
    elif em_tuner is not None:
        raise ValueError(f"unknown em_tuner {em_tuner!r}")
    fit = vbl_iterate(X, Y, hp0, None, stop, form=form, hyper=hook, track=False, cov=cov)
    if em_tuner is not None:
        _check_divergence(fit.hp, fit.hp_em)
    return TuneResult(fit.hp, fit.hp_em, trace, fit)


def tune_dirac_em(
    X: NDArray,
    Y: NDArray,
    hp0: HyperParams,
    stop: StoppingRule | None = None,
    *,
    path: str = "em",
    K: int = COLD_SKIP,
    form: str = "auto",
    cov: str = "full",
) -> TuneResult:
    """Point-mass hyperparameter factor updated once per iteration on ``path``."""
    if hp0.kind not in (PriorKind.LAPLACE_NU1, PriorKind.INVGAUSS_NU0):
        raise ValueError("Dirac tuning is available for nu = 1 and nu = 0 only")
    stop = StoppingRule(max_iter=500, metric="delta", eps=1e-10) if stop is None else stop
    trace = HyperTrace()
    fit = vbl_iterate(X, Y, hp0, None, stop, form=form, hyper=dirac_hook(trace, path, K), track=False, cov=cov)
    return TuneResult(fit.hp, fit.hp_em, trace, fit)


def tune_nested(
    X: NDArray,
    Y: NDArray,
    hp0: HyperParams,
    inner_stop: StoppingRule | None = None,
    outer_max: int = 50,
    outer_tol: float = 1e-8,
    *,
    form: str = "auto",
    cov: str = "full",
    callback: Callable[[int, HyperParams, PosteriorTriple], None] | None = None,
) -> TuneResult:
    """Alternate a converged VBL fit with one M-step on ``(gamma^2, lambda)``.

    The trace objective is the free energy (negative ELBO with all
    hyperparameter-dependent terms) at the converged factor and the updated
    hyperparameters.
    Each inner fit warm-starts from the previous one.  Stops when the relative
    change of both hyperparameters is below ``outer_tol``.  The EM path
    shares the hyperparameters.
    """
    inner_stop = StoppingRule(max_iter=500, metric="delta", eps=1e-10) if inner_stop is None else inner_stop
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    n = X.shape[0]
    hp = hp0
    trace = HyperTrace()
    triple = None
    fit = None
    for tau in range(1, outer_max + 1):
        fit = vbl_iterate(X, Y, hp, triple, inner_stop, form=form, track=False, cov=cov)
        triple = fit.triple
        if triple.C is None:
            raise ValueError(f"nested tuning needs the full covariance (p <= {FULL_COV_LIMIT}); use tune_interleaved")
        g2 = gamma_sq_update(m=triple.m, C=triple.C, X=X, Y=Y)
        try:
            lam = lambda_update(triple.m, triple.C_diag, hp, previous=hp.lam)
        except DegenerateUpdateError as exc:
            logger.warning("%s; keeping lambda=%g", exc, hp.lam)
            lam = hp.lam
        new = hp.with_(gamma_sq=g2, lam=lam)
        r = Y - X @ triple.m
        e = triple.C_diag + triple.m**2
        obj = free_energy(
            new, n, float(r @ r), float(np.sum((X @ triple.C) * X)), np.linalg.slogdet(triple.C)[1], e, e
        )
        trace.append(tau, new.gamma_sq, new.lam, obj, "vbem")
        if callback is not None:
            callback(tau, new, triple)
        change = max(abs(new.gamma_sq - hp.gamma_sq) / hp.gamma_sq, abs(new.lam - hp.lam) / max(hp.lam, 1e-300))
        hp = new
        if change <= outer_tol:
            break
    return TuneResult(hp, hp, trace, fit)
