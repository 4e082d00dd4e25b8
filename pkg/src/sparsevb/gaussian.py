"""Conditionally Gaussian linear-model algebra.

Batch posterior in primal (p x p precision) and dual (n x n Woodbury) form,
a rank-one Kalman step, the pseudo-observation rewrite of the batch mean,
a reduced-rank eigendecomposition used to compress carried design rows,
and a plain conjugate-gradient solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.linalg import blas
from numpy.typing import NDArray

logger = logging.getLogger(__name__)

__all__ = [
    "IllConditionedError",
    "GaussianPosterior",
    "SufficientStats",
    "cholesky_jitter",
    "posterior_primal",
    "posterior_dual",
    "posterior",
    "kalman_step",
    "recursive_rewrite_update",
    "reduced_rank_eig",
    "ReducedRank",
    "cg_solve",
    "CGResult",
    "symmetrize",
    "weighted_gram",
]

JITTER_START = 1e-12
JITTER_STOP = 1e-6


class IllConditionedError(np.linalg.LinAlgError):
    """A factorization failed even after the jitter ladder."""

    def __init__(self, msg: str, cond: float | None = None, iteration: int | None = None):
        self.cond = cond
        self.iteration = iteration
        if cond is not None:
            msg = f"{msg} (condition estimate {cond:.3e})"
        if iteration is not None:
            msg = f"{msg} at iteration {iteration}"
        super().__init__(msg)


def symmetrize(C: NDArray) -> NDArray:
    return 0.5 * (C + C.T)


def weighted_gram(X: NDArray, weights: NDArray | None = None, chunk: int = 8192) -> NDArray:
    """``X diag(weights) X^T`` accumulated over column chunks with SYRK."""
    n, p = X.shape
    G = np.zeros((n, n), order="F")
    for j in range(0, p, chunk):
        blk = X[:, j : j + chunk]
        if weights is not None:
            blk = blk * np.sqrt(weights[j : j + chunk])
        # blk.T is Fortran-ordered (c x n) when blk is C-ordered, so no copy is made
        G = blas.dsyrk(1.0, np.asarray(blk.T, order="F"), beta=1.0, c=G, trans=1, overwrite_c=1)
    G = np.triu(G)
    return G + np.triu(G, 1).T


def cholesky_jitter(S: NDArray, overwrite: bool = False) -> tuple[NDArray, float]:
    """Lower Cholesky factor of ``S``, adding ``jitter * I`` on failure.

    The ladder starts at ``1e-12 * trace/p`` and grows by 10x up to ``1e-6 *
    trace/p``.  Returns ``(L, jitter)`` with the jitter actually applied.
    """
    try:
        return sla.cholesky(S, lower=True, overwrite_a=overwrite, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    n = S.shape[0]
    scale = max(np.trace(S) / n, np.finfo(float).tiny)
    jitter = JITTER_START * scale
    while jitter <= JITTER_STOP * scale * (1 + 1e-9):
        try:
            L = sla.cholesky(S + jitter * np.eye(n), lower=True, check_finite=False)
            logger.warning("cholesky needed jitter %.3e", jitter)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    try:
        cond = float(np.linalg.cond(S))
    except np.linalg.LinAlgError:
        cond = float("inf")
    raise IllConditionedError("Cholesky factorization failed after jitter ladder", cond=cond)


@dataclass
class GaussianPosterior:
    m: NDArray
    C: NDArray


@dataclass
class SufficientStats:
    """Running ``A = X^T X``, ``v = X^T Y``, ``s = Y^T Y`` and row count."""

    A: NDArray
    v: NDArray
    s: float = 0.0
    count: int = 0

    @classmethod
    def zeros(cls, p: int) -> SufficientStats:
        return cls(np.zeros((p, p)), np.zeros(p), 0.0, 0)

    @classmethod
    def from_data(cls, X: NDArray, Y: NDArray) -> SufficientStats:
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        return cls(X.T @ X, X.T @ Y, float(Y @ Y), X.shape[0])

    @property
    def p(self) -> int:
        return self.v.shape[0]

    def __add__(self, other: SufficientStats) -> SufficientStats:
        return SufficientStats(self.A + other.A, self.v + other.v, self.s + other.s, self.count + other.count)

    def copy(self) -> SufficientStats:
        return SufficientStats(self.A.copy(), self.v.copy(), self.s, self.count)


def _as_precision(prior_precision, p: int) -> NDArray:
    P = np.asarray(prior_precision, dtype=float)
    if P.ndim == 0:
        return float(P) * np.eye(p)
    if P.ndim == 1:
        return np.diag(P)
    return P


def posterior_primal(stats: SufficientStats, prior_mean, prior_precision, gamma_sq: float) -> GaussianPosterior:
    """``C = (A/g2 + P0)^{-1}``, ``m = C (v/g2 + P0 m0)``.

    ``prior_precision`` may be a scalar, the diagonal, or a full matrix.
    """
    if not gamma_sq > 0:
        raise ValueError("gamma_sq must be positive")
    p = stats.p
    P0 = _as_precision(prior_precision, p)
    m0 = np.broadcast_to(np.asarray(prior_mean, dtype=float), (p,))
    if stats.count == 0:
        C0 = np.linalg.inv(P0)
        return GaussianPosterior(m0.copy(), symmetrize(C0))
    P = stats.A / gamma_sq + P0
    L, _ = cholesky_jitter(symmetrize(P))
    C = sla.cho_solve((L, True), np.eye(p), check_finite=False)
    m = sla.cho_solve((L, True), stats.v / gamma_sq + P0 @ m0, check_finite=False)
    return GaussianPosterior(m, symmetrize(C))


def posterior_dual(X: NDArray, Y: NDArray, prior_mean, prior_cov, gamma_sq: float) -> GaussianPosterior:
    """Woodbury form: ``m = m0 + C0 X^T (g2 I + X C0 X^T)^{-1} (Y - X m0)``."""
    if not gamma_sq > 0:
        raise ValueError("gamma_sq must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    n, p = X.shape
    C0 = np.asarray(prior_cov, dtype=float)
    if C0.ndim == 0:
        C0 = float(C0) * np.eye(p)
    elif C0.ndim == 1:
        C0 = np.diag(C0)
    m0 = np.broadcast_to(np.asarray(prior_mean, dtype=float), (p,))
    C0Xt = C0 @ X.T
    G = gamma_sq * np.eye(n) + X @ C0Xt
    L, _ = cholesky_jitter(symmetrize(G))
    K = sla.cho_solve((L, True), C0Xt.T, check_finite=False).T
    m = m0 + K @ (Y - X @ m0)
    C = C0 - K @ C0Xt.T
    return GaussianPosterior(m, symmetrize(C))


def posterior(X: NDArray, Y: NDArray, prior_mean, prior_cov, gamma_sq: float, form: str = "auto") -> GaussianPosterior:
    """Pick primal or dual form by ``min(p, n)`` unless ``form`` forces one."""
    n, p = np.shape(X)
    if form == "auto":
        form = "primal" if p <= n else "dual"
    if form == "dual":
        return posterior_dual(X, Y, prior_mean, prior_cov, gamma_sq)
    C0 = np.asarray(prior_cov, dtype=float)
    P0 = 1.0 / C0 if C0.ndim <= 1 else np.linalg.inv(C0)
    return posterior_primal(SufficientStats.from_data(X, Y), prior_mean, P0, gamma_sq)


def kalman_step(prev: GaussianPosterior, x: NDArray, y: float, gamma_sq: float) -> GaussianPosterior:
    """Assimilate one row ``(x, y)``; O(p^2)."""
    x = np.asarray(x, dtype=float)
    Cx = prev.C @ x
    s = gamma_sq + x @ Cx
    gain = Cx / s
    m = prev.m + gain * (y - x @ prev.m)
    C = prev.C - np.outer(gain, Cx)
    return GaussianPosterior(m, symmetrize(C))


def recursive_rewrite_update(
    prev_mean: NDArray, prior_cov, carried: NDArray, X_new: NDArray, Y_new: NDArray, gamma_sq: float
) -> NDArray:
    """Batch mean from the previous mean and pseudo-observations.

    Stacks ``carried`` (rows already assimilated) over ``X_new`` and replaces
    the old labels by ``carried @ prev_mean``; the prior mean is moved to
    ``prev_mean``.  Exact when ``prev_mean`` is the posterior mean of
    ``carried`` under the same prior covariance.
    """
    prev_mean = np.asarray(prev_mean, dtype=float)
    carried = np.atleast_2d(np.asarray(carried, dtype=float)).reshape(-1, prev_mean.size)
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float)).reshape(-1, prev_mean.size)
    Xs = np.vstack([carried, X_new])
    if Xs.shape[0] == 0 or not np.isfinite(gamma_sq):
        return prev_mean.copy()
    Y_hat = np.concatenate([carried @ prev_mean, np.asarray(Y_new, dtype=float).ravel()])
    return posterior_dual(Xs, Y_hat, prev_mean, prior_cov, gamma_sq).m


@dataclass
class ReducedRank:
    U: NDArray
    sigma: NDArray
    X_hat: NDArray
    tail: float = 0.0  # sum of dropped squared singular values
    frob_error: float = field(default=float("nan"))


def reduced_rank_eig(S: NDArray, M: int, chunk: int = 16384, out: NDArray | None = None) -> ReducedRank:
    """Rank-``M`` compression of the rows of ``S`` (``2M x p``).

    Eigendecomposes the small Gram matrix ``S S^T = U Sigma^2 U^T``, keeps the
    leading ``M`` eigenpairs and returns ``X_hat = U^T S`` so that ``X_hat^T
    X_hat`` is the best rank-``M`` approximation of ``S^T S``.  The error
    ``||S^T S - X_hat^T X_hat||_F`` equals the 2-norm of the dropped
    eigenvalues; ``tail`` reports their sum.  Works column-chunked so ``S`` is
    never copied whole; ``out`` may alias the first ``M`` rows of ``S``.
    """
    r, p = S.shape
    G = weighted_gram(S, None, chunk)
    evals, evecs = np.linalg.eigh(G)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    # fixed sign convention: largest-magnitude entry of each eigenvector positive
    idx = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[idx, np.arange(r)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    M = min(M, r)
    U = evecs[:, :M]
    kept = np.clip(evals[:M], 0.0, None)
    dropped = np.clip(evals[M:], 0.0, None)
    X_hat = np.empty((M, p)) if out is None else out
    for j in range(0, p, chunk):
        blk = U.T @ S[:, j : j + chunk]
        X_hat[:, j : j + chunk] = blk
    return ReducedRank(U, np.sqrt(kept), X_hat, float(dropped.sum()), float(np.sqrt(np.sum(dropped**2))))


@dataclass
class CGResult:
    x: NDArray
    converged: bool
    n_iter: int
    residual_norm: float


def cg_solve(apply_A: Callable[[NDArray], NDArray], b: NDArray, tol: float = 1e-10, max_iter: int | None = None) -> CGResult:
    """Conjugate gradients for an SPD operator given as a callable.

    Stops once ``||r|| <= tol * ||b||``.  Never raises on non-convergence:
    check ``converged``.
    """
    b = np.asarray(b, dtype=float)
    max_iter = b.size * 10 if max_iter is None else max_iter
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(x, True, 0, 0.0)
    r = b.copy()
    d = r.copy()
    rr = r @ r
    target = tol * bnorm
    for it in range(1, max_iter + 1):
        Ad = apply_A(d)
        alpha = rr / (d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        rr_new = r @ r
        if np.sqrt(rr_new) <= target:
            return CGResult(x, True, it, float(np.sqrt(rr_new)))
        d = r + (rr_new / rr) * d
        rr = rr_new
    return CGResult(x, False, max_iter, float(np.sqrt(rr)))
