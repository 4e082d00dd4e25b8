"""Monolithic variational Bayesian LASSO.

Two iterations run in lockstep on the same data:

* EM for the MAP estimate ``mu``: ``1/theta = E[1/theta | mu]`` then a
  weighted ridge solve;
* VBEM for the Gaussian factor ``q(beta) = N(m, C)``: the same update but the
  mixing moment is taken at ``C_jj + m_j**2`` instead of ``mu_j**2``.

The two paths share only the data.  Each iteration records the misfit, the
evidence lower bound (up to a constant) and the EM log joint so that the
descent/ascent properties can be checked.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.linalg import blas
from numpy.typing import NDArray

from .gaussian import IllConditionedError, SufficientStats, cholesky_jitter, symmetrize, weighted_gram
from .gig import GigParams, PriorKind, cond_inv_theta, log_gig_normalizer, log_marginal_prior

logger = logging.getLogger(__name__)

__all__ = [
    "HyperParams",
    "PosteriorTriple",
    "StoppingRule",
    "VBLTrace",
    "VBLResult",
    "em_theta_update",
    "vbem_theta_update",
    "vbl_iterate",
    "vbl_iterate_stats",
    "credible_flags",
    "CredibleReport",
    "threshold",
    "elbo",
    "em_log_joint",
    "PrimalSystem",
    "DualSystem",
    "IterState",
    "free_energy",
    "prior_offset",
]

FULL_COV_LIMIT = 4000
CHUNK = 8192


@dataclass(frozen=True)
class HyperParams:
    """Noise variance, sparsity scale, smoothing and GIG shape."""

    gamma_sq: float
    lam: float
    delta: float = 1e-3
    nu: float = 1.0
    kind: PriorKind = PriorKind.LAPLACE_NU1

    def __post_init__(self):
        if not self.gamma_sq > 0:
            raise ValueError(f"gamma_sq must be positive, got {self.gamma_sq}")
        self.gig()  # validates the prior branch

    def gig(self) -> GigParams:
        lam = 0.0 if self.kind.improper else self.lam
        return GigParams(self.nu, self.delta, lam, self.kind)

    @property
    def gamma(self) -> float:
        return math.sqrt(self.gamma_sq)

    def with_(self, **kw) -> HyperParams:
        return replace(self, **kw)


@dataclass
class PosteriorTriple:
    """MAP iterate ``mu``, variational mean ``m`` and covariance ``C``.

    On the large-p paths ``C`` is ``None`` and only ``C_diag`` is kept.
    """

    mu: NDArray
    m: NDArray
    C: NDArray | None = None
    C_diag: NDArray | None = None

    def __post_init__(self):
        if self.C_diag is None and self.C is not None:
            self.C_diag = np.diag(self.C).copy()

    @property
    def p(self) -> int:
        return self.m.size

    @property
    def std(self) -> NDArray:
        return np.sqrt(np.clip(self.C_diag, 0.0, None))

    def copy(self) -> PosteriorTriple:
        return PosteriorTriple(
            self.mu.copy(), self.m.copy(), None if self.C is None else self.C.copy(), self.C_diag.copy()
        )

    @classmethod
    def cold(cls, p: int, theta0: NDArray | float = 1.0, full: bool = True) -> PosteriorTriple:
        theta0 = np.broadcast_to(np.asarray(theta0, dtype=float), (p,)).copy()
        return cls(np.zeros(p), np.zeros(p), np.diag(theta0) if full else None, theta0)


@dataclass(frozen=True)
class StoppingRule:
    """``max_iter`` cap plus a tolerance on one of two distances.

    ``metric='misfit'`` stops when ``||X m - Y||`` (and the same for ``mu``)
    drops to ``eps``; ``metric='delta'`` when successive iterates move by at
    most ``eps``.  ``eps=None`` means ``rho * gamma * sqrt(n)``.
    """

    max_iter: int = 100
    eps: float | None = None
    metric: str = "misfit"
    rho: float = 0.9

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.metric not in ("misfit", "delta"):
            raise ValueError(f"unknown metric {self.metric!r}")

    def tolerance(self, gamma: float, n: int) -> float:
        return self.rho * gamma * math.sqrt(n) if self.eps is None else self.eps


def em_theta_update(mu: NDArray, hp: HyperParams) -> NDArray:
    """Precisions ``1/theta_j = E[1/theta_j | mu_j]`` for the MAP path."""
    return np.atleast_1d(cond_inv_theta(hp.gig(), np.square(mu)))


def vbem_theta_update(m: NDArray, C_diag: NDArray, hp: HyperParams) -> NDArray:
    """Precisions ``E_q[1/theta_j]`` with the second moment ``C_jj + m_j^2``."""
    C_diag = np.asarray(C_diag, dtype=float)
    if np.any(C_diag < 0):
        raise ValueError("C_diag must be nonnegative")
    return np.atleast_1d(cond_inv_theta(hp.gig(), C_diag + np.square(m)))


# --------------------------------------------------------------------------
# Linear systems.  Both return a _Solve holding what the loop needs.


@dataclass
class _Solve:
    mean: NDArray
    C: NDArray | None
    C_diag: NDArray | None
    logdet_C: float = float("nan")
    tr_XCX: float = float("nan")


class PrimalSystem:
    """Data held as sufficient statistics; solves with the p x p precision."""

    form = "primal"

    def __init__(self, stats: SufficientStats):
        self.stats = stats
        self.n = stats.count
        self.p = stats.p

    def solve(self, inv_theta: NDArray, gamma_sq: float, m0: NDArray | None = None, cov: str = "full") -> _Solve:
        A, v = self.stats.A, self.stats.v
        P = A / gamma_sq
        P[np.diag_indices_from(P)] += inv_theta
        L, _ = cholesky_jitter(P, overwrite=True)
        rhs = v / gamma_sq if m0 is None else v / gamma_sq + inv_theta * m0
        mean = sla.cho_solve((L, True), rhs, check_finite=False)
        if cov == "none":
            return _Solve(mean, None, None)
        Linv = sla.solve_triangular(L, np.eye(self.p), lower=True, check_finite=False)
        C = symmetrize(Linv.T @ Linv)
        logdet = -2.0 * float(np.sum(np.log(np.diag(L))))
        return _Solve(mean, C, np.diag(C).copy(), logdet, float(np.sum(A * C)))

    def sq_misfit(self, m: NDArray) -> float:
        s = self.stats
        return max(s.s - 2.0 * s.v @ m + m @ s.A @ m, 0.0)


class DualSystem:
    """Dense design ``X`` (n x p) with ``n`` small; solves in Woodbury form.

    Products over the p axis are column-chunked so no p x p or second n x p
    array is formed.  The full covariance is only built when ``p`` is below
    ``FULL_COV_LIMIT``.
    """

    form = "dual"

    def __init__(self, X: NDArray, Y: NDArray, chunk: int = CHUNK):
        self.X = X
        self.Y = np.asarray(Y, dtype=float)
        self.n, self.p = X.shape
        self.chunk = chunk

    def _gram(self, theta: NDArray) -> NDArray:
        return weighted_gram(self.X, theta, self.chunk)

    def solve(
        self,
        inv_theta: NDArray,
        gamma_sq: float,
        m0: NDArray | None = None,
        cov: str = "full",
        Y: NDArray | None = None,
    ) -> _Solve:
        if np.any(inv_theta <= 0):
            raise IllConditionedError("dual form needs finite prior variances; use the primal form")
        theta = 1.0 / inv_theta
        X, n = self.X, self.n
        Y = self.Y if Y is None else Y
        H = self._gram(theta)
        G = H.copy()
        G[np.diag_indices_from(G)] += gamma_sq
        L, _ = cholesky_jitter(G)
        resid = Y if m0 is None else Y - X @ m0
        alpha = sla.cho_solve((L, True), resid, check_finite=False)
        mean = theta * (X.T @ alpha)
        if m0 is not None:
            mean += m0
        if cov == "none":
            return _Solve(mean, None, None)
        logdet = float(np.sum(np.log(theta))) + n * math.log(gamma_sq) - 2.0 * float(np.sum(np.log(np.diag(L))))
        LiH = sla.solve_triangular(L, H, lower=True, check_finite=False)
        tr_XCX = float(np.trace(H) - np.sum(LiH * LiH))
        if cov == "full" and self.p <= FULL_COV_LIMIT:
            W = sla.solve_triangular(L, X * theta, lower=True, check_finite=False)
            C = -(W.T @ W)
            C[np.diag_indices_from(C)] += theta
            C = symmetrize(C)
            return _Solve(mean, C, np.diag(C).copy(), logdet, tr_XCX)
        C_diag = np.empty(self.p)
        LF = np.asfortranarray(L)
        for j in range(0, self.p, self.chunk):
            sl = slice(j, j + self.chunk)
            B = X[:, sl] * theta[sl]
            # right-sided solve on the transposed block avoids layout copies
            W = blas.dtrsm(1.0, LF, B.T, side=1, lower=1, trans_a=1, overwrite_b=1)
            C_diag[sl] = theta[sl] - np.einsum("ij,ij->i", W, W)
        return _Solve(mean, None, C_diag, logdet, tr_XCX)

    def sq_misfit(self, m: NDArray, Y: NDArray | None = None) -> float:
        r = self.X @ m - (self.Y if Y is None else Y)
        return float(r @ r)


def _make_system(X: NDArray, Y: NDArray, form: str):
    n, p = X.shape
    if form == "auto":
        form = "primal" if p <= n else "dual"
    if form == "primal":
        return PrimalSystem(SufficientStats.from_data(X, Y))
    if form == "dual":
        return DualSystem(np.asarray(X, dtype=float), Y)
    raise ValueError(f"unknown form {form!r}")


# --------------------------------------------------------------------------
# Objectives


def _elbo_terms(
    hp: HyperParams, n: int, sq_misfit: float, tr_XCX: float, logdet_C: float, second_moment: NDArray, q_beta_sq: NDArray
) -> float:
    g2 = hp.gamma_sq
    val = -0.5 * n * math.log(g2) - 0.5 * (sq_misfit + tr_XCX) / g2 + 0.5 * logdet_C
    prior = hp.gig()
    if hp.kind is PriorKind.GAUSSIAN:
        return val - 0.5 * hp.lam * float(np.sum(second_moment)) + 0.5 * second_moment.size * math.log(hp.lam)
    chi_q = prior.delta**2 + q_beta_sq
    e_inv = np.atleast_1d(cond_inv_theta(prior, q_beta_sq))
    psi = 0.0 if hp.kind.improper else prior.lam**2
    log_zq = log_gig_normalizer(hp.nu - 0.5, chi_q, psi)
    return val + float(np.sum(log_zq - 0.5 * (second_moment + prior.delta**2 - chi_q) * e_inv))


def prior_offset(hp: HyperParams, p: int) -> float:
    """Hyperparameter-dependent constant dropped from :func:`elbo`.

    ``-p log`` of the mixing-density normalizer; ``nan`` for improper priors,
    whose normalizer does not exist.
    """
    if hp.kind is PriorKind.GAUSSIAN:
        return 0.0
    if hp.kind.improper:
        return float("nan")
    return -p * float(log_gig_normalizer(hp.nu, hp.delta**2, hp.lam**2)[0])


def free_energy(
    hp: HyperParams, n: int, sq_misfit: float, tr_XCX: float, logdet_C: float, second_moment: NDArray, q_beta_sq: NDArray
) -> float:
    """Negative ELBO including every term that depends on ``(gamma^2, lambda)``.

    Comparable across hyperparameter values (up to a constant in ``n, p``);
    the inner iteration and each hyperparameter M-step decrease it.
    """
    val = _elbo_terms(hp, n, sq_misfit, tr_XCX, logdet_C, second_moment, q_beta_sq)
    return -(val + prior_offset(hp, second_moment.size))


def elbo(X: NDArray, Y: NDArray, hp: HyperParams, m: NDArray, C: NDArray, q_beta_sq: NDArray) -> float:
    """Evidence lower bound up to a constant that depends on nothing but ``hp``.

    ``q(theta_j)`` is the GIG conditional at second moment ``q_beta_sq[j]``
    (what the theta-update produced); ``q(beta) = N(m, C)``.
    """
    X = np.atleast_2d(X)
    r = X @ m - Y
    sign, logdet = np.linalg.slogdet(C)
    if sign <= 0:
        raise ValueError("C must be positive definite")
    tr = float(np.sum((X @ C) * X))
    return _elbo_terms(hp, X.shape[0], float(r @ r), tr, logdet, np.diag(C) + m**2, np.asarray(q_beta_sq, dtype=float))


def em_log_joint(sq_misfit: float, n: int, mu: NDArray, hp: HyperParams) -> float:
    """``log p(Y, mu)`` up to a constant, with the marginal (mixed-out) prior."""
    val = -0.5 * n * math.log(hp.gamma_sq) - 0.5 * sq_misfit / hp.gamma_sq
    return val + float(np.sum(log_marginal_prior(hp.gig(), np.square(mu))))


# --------------------------------------------------------------------------
# Trace


TRACE_COLUMNS = ("iter", "misfit", "elbo", "em_logjoint", "delta_m", "delta_mu")


@dataclass
class VBLTrace:
    rows: list[dict] = field(default_factory=list)
    best: PosteriorTriple | None = None
    best_iter: int = -1

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> NDArray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path, extra: Sequence[str] = ()) -> None:
        cols = list(TRACE_COLUMNS) + list(extra)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([_fmt(r.get(c, "")) for c in cols])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class IterState:
    """Snapshot handed to hyperparameter hooks after each iteration."""

    t: int
    system: object
    triple: PosteriorTriple
    hp: HyperParams
    hp_em: HyperParams
    q_beta_sq: NDArray
    cold: bool
    sq_misfit: float = float("nan")
    sq_misfit_mu: float = float("nan")
    tr_XCX: float = float("nan")
    logdet_C: float = float("nan")


HyperHook = Callable[[IterState], "tuple[HyperParams, HyperParams]"]


@dataclass
class VBLResult:
    triple: PosteriorTriple
    trace: VBLTrace
    hp: HyperParams
    hp_em: HyperParams
    n_iter: int
    converged: bool

    def __iter__(self):
        # allows ``triple, trace = vbl_iterate(...)``
        return iter((self.triple, self.trace))


def _vbl_loop(
    system,
    hp: HyperParams,
    init: PosteriorTriple | None,
    stop: StoppingRule,
    hp_em: HyperParams | None,
    hyper: HyperHook | None,
    callback: Callable[[int, PosteriorTriple], dict | None] | None,
    track: bool,
    cov: str,
) -> VBLResult:
    p, n = system.p, system.n
    hp_em = hp if hp_em is None else hp_em
    cold = init is None
    triple = PosteriorTriple.cold(p, full=(cov == "full" and p <= FULL_COV_LIMIT)) if cold else init.copy()
    trace = VBLTrace()
    best_misfit = np.inf
    converged = False
    t = 0
    for t in range(stop.max_iter):
        q_beta_sq = triple.C_diag + triple.m**2
        inv_v = vbem_theta_update(triple.m, triple.C_diag, hp)
        # at a cold start mu = 0 makes the E-step degenerate for small delta; use theta0 instead
        inv_e = 1.0 / triple.C_diag if (cold and t == 0) else em_theta_update(triple.mu, hp_em)
        try:
            sv = system.solve(inv_v, hp.gamma_sq, cov=cov)
            se = system.solve(inv_e, hp_em.gamma_sq, cov="none")
        except IllConditionedError as exc:
            raise IllConditionedError(str(exc), exc.cond, iteration=t) from exc
        new = PosteriorTriple(se.mean, sv.mean, sv.C, sv.C_diag)
        d_m = float(np.linalg.norm(new.m - triple.m))
        d_mu = float(np.linalg.norm(new.mu - triple.mu))
        if new.C is not None and triple.C is not None:
            d_C = float(np.linalg.norm(new.C - triple.C))
        else:
            d_C = float(np.linalg.norm(new.C_diag - triple.C_diag))
        triple = new
        mis_m = system.sq_misfit(triple.m)
        mis_mu = system.sq_misfit(triple.mu)
        row = dict(
            iter=t + 1,
            misfit=math.sqrt(mis_m),
            misfit_mu=math.sqrt(mis_mu),
            delta_m=d_m,
            delta_mu=d_mu,
            delta_C=d_C,
            gamma_sq=hp.gamma_sq,
            lam=hp.lam,
            gamma_sq_em=hp_em.gamma_sq,
            lam_em=hp_em.lam,
        )
        if track:
            row["elbo"] = _elbo_terms(hp, n, mis_m, sv.tr_XCX, sv.logdet_C, triple.C_diag + triple.m**2, q_beta_sq)
            row["em_logjoint"] = em_log_joint(mis_mu, n, triple.mu, hp_em)
        if callback is not None:
            extra = callback(t + 1, triple)
            if extra:
                row.update(extra)
        trace.append(**row)
        if row["misfit"] < best_misfit:
            best_misfit = row["misfit"]
            trace.best, trace.best_iter = triple.copy(), t + 1
        if hyper is not None:
            state = IterState(t + 1, system, triple, hp, hp_em, q_beta_sq, cold, mis_m, mis_mu, sv.tr_XCX, sv.logdet_C)
            hp, hp_em = hyper(state)
        if stop.metric == "misfit":
            eps = stop.tolerance(math.sqrt(max(hp.gamma_sq, hp_em.gamma_sq)), n)
            done = max(row["misfit"], row["misfit_mu"]) <= eps
        else:
            done = max(d_m, d_mu, d_C) <= stop.tolerance(hp.gamma, n)
        if done:
            converged = True
            break
    return VBLResult(triple, trace, hp, hp_em, t + 1, converged)


def vbl_iterate(
    X: NDArray,
    Y: NDArray,
    hp: HyperParams,
    init: PosteriorTriple | None = None,
    stop: StoppingRule | None = None,
    *,
    form: str = "auto",
    hp_em: HyperParams | None = None,
    hyper: HyperHook | None = None,
    callback: Callable[[int, PosteriorTriple], dict | None] | None = None,
    track: bool = True,
    cov: str = "full",
) -> VBLResult:
    """Run the coupled EM/VBEM iteration on a dense design.

    ``init=None`` is a cold start: ``mu = m = 0``, ``C = I`` (theta0 = 1).
    ``form`` chooses primal or dual (Woodbury) algebra; ``'auto'`` picks by
    ``min(p, n)``.  ``hp_em`` lets the MAP path carry its own hyperparameters.
    ``hyper`` is called after every iteration and may return new
    hyperparameters for both paths.  ``callback(t, triple)`` can add columns
    to the trace.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    if X.shape[0] != Y.size:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.size} entries")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("X and Y must be finite")
    stop = StoppingRule() if stop is None else stop
    system = _make_system(X, Y, form)
    return _vbl_loop(system, hp, init, stop, hp_em, hyper, callback, track, cov)


def vbl_iterate_stats(
    stats: SufficientStats,
    hp: HyperParams,
    init: PosteriorTriple | None = None,
    stop: StoppingRule | None = None,
    *,
    hp_em: HyperParams | None = None,
    hyper: HyperHook | None = None,
    callback=None,
    track: bool = True,
) -> VBLResult:
    """Same iteration driven only by ``(A, v, s, n)``; always primal."""
    stop = StoppingRule() if stop is None else stop
    return _vbl_loop(PrimalSystem(stats), hp, init, stop, hp_em, hyper, callback, track, "full")


# --------------------------------------------------------------------------
# Reporting


@dataclass
class CredibleReport:
    lower: NDArray
    upper: NDArray
    zero_inside: NDArray
    flagged: NDArray  # MAP estimate outside the 2-sigma interval

    def rows(self, names: Sequence[str] | None = None):
        names = names or [f"beta{j}" for j in range(self.lower.size)]
        for j, name in enumerate(names):
            yield name, self.lower[j], self.upper[j], bool(self.zero_inside[j]), bool(self.flagged[j])


def credible_flags(triple: PosteriorTriple, width: float = 2.0) -> CredibleReport:
    """``m_j +- 2 sqrt(C_jj)`` intervals; flag coordinates whose ``mu_j`` falls outside."""
    sd = triple.std
    lo, hi = triple.m - width * sd, triple.m + width * sd
    inside0 = (lo < 0) & (0 < hi)
    flagged = ~((lo < triple.mu) & (triple.mu < hi))
    # a zero-width interval with mu == m is not unusual
    flagged &= ~np.isclose(triple.mu, triple.m, rtol=0, atol=1e-14)
    return CredibleReport(lo, hi, inside0, flagged)


def threshold(v: NDArray, eps: float) -> NDArray:
    """Zero every entry with ``|v_j| <= eps``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    v = np.asarray(v, dtype=float)
    return np.where(np.abs(v) > eps, v, 0.0)
