"""Online variational Bayesian LASSO.

Two regimes:

* exact: the data enter only through ``(X^T X, X^T Y, Y^T Y, n)``, which are
  accumulated batch by batch; after each batch the coupled EM/VBEM iteration
  is restarted from the previous fixed point against the running statistics.
  Needs a dense ``p x p`` solve.
* approximate (large ``p``): the information from earlier batches is carried
  as ``M`` pseudo-rows ``X_hat``.  Each new batch is stacked under ``X_hat``,
  the old labels are replaced by ``X_hat m*``, the gains are computed in the
  ``2M x 2M`` dual form, and the stacked rows are compressed back to ``M``
  rows by a reduced-rank eigendecomposition.  Memory is ``O(Mp)``; only the
  diagonal of the covariance is kept.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from .gaussian import SufficientStats, reduced_rank_eig
from .vbl import (
    DualSystem,
    HyperParams,
    PosteriorTriple,
    StoppingRule,
    VBLResult,
    em_theta_update,
    vbem_theta_update,
    vbl_iterate,
    vbl_iterate_stats,
)

logger = logging.getLogger(__name__)

__all__ = [
    "BatchStrategy",
    "BatchPlan",
    "make_batches",
    "iter_blocks",
    "stats_accumulate",
    "online_exact_vbl",
    "OnlineExactResult",
    "LowRankState",
    "online_approx_step",
    "online_approx_vbl",
    "OnlineApproxResult",
    "CompressionError",
    "CovarianceUnavailableError",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class CompressionError(np.linalg.LinAlgError):
    """The reduced-rank eigendecomposition failed."""

    def __init__(self, msg: str, batch_index: int):
        self.batch_index = batch_index
        super().__init__(f"{msg} (batch {batch_index})")


class CovarianceUnavailableError(LookupError):
    """Off-diagonal covariance is not stored on the large-p path."""


# --------------------------------------------------------------------------
# Batching


class BatchStrategy(str, enum.Enum):
    SEQUENTIAL = "sequential"
    RANDOM = "random"
    STRIDED = "strided"


@dataclass(frozen=True)
class BatchPlan:
    """Batch size ``M`` and the rule used to split ``0..n-1``.

    ``strided`` uses stride ``b = ceil(n/M)`` so that batch ``i`` is
    ``(i, i+b, i+2b, ...)``; every batch then has at most ``M`` rows and the
    batches spread evenly over the index range.
    """

    batch_size: int
    strategy: BatchStrategy = BatchStrategy.SEQUENTIAL
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        object.__setattr__(self, "strategy", BatchStrategy(self.strategy))

    def stride(self, n_total: int) -> int:
        return max(1, math.ceil(n_total / self.batch_size))


def make_batches(n_total: int, plan: BatchPlan) -> list[NDArray]:
    """Partition ``range(n_total)`` into index arrays according to ``plan``."""
    if n_total < 0:
        raise ValueError("n_total must be nonnegative")
    M = plan.batch_size
    if plan.strategy is BatchStrategy.STRIDED:
        b = plan.stride(n_total)
        return [np.arange(i, n_total, b) for i in range(min(b, n_total))]
    idx = np.arange(n_total)
    if plan.strategy is BatchStrategy.RANDOM:
        idx = np.random.default_rng(plan.seed).permutation(n_total)
    return [idx[i : i + M] for i in range(0, n_total, M)]


def iter_blocks(X: NDArray, Y: NDArray, batches: Sequence[NDArray]) -> Iterator[tuple[NDArray, NDArray]]:
    for b in batches:
        yield X[b], Y[b]


# --------------------------------------------------------------------------
# Exact path


def stats_accumulate(stats: SufficientStats, X: NDArray, Y: NDArray) -> SufficientStats:
    """Add one batch to the running statistics (returns a new object)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    if X.shape[0] == 0 or Y.size == 0:
        if X.shape[0] != Y.size:
            raise ValueError("X and Y disagree on the number of rows")
        return stats.copy()
    if X.shape[1] != stats.p or X.shape[0] != Y.size:
        raise ValueError(f"batch of shape {X.shape} / {Y.shape} does not match p={stats.p}")
    return stats + SufficientStats.from_data(X, Y)


@dataclass
class OnlineExactResult:
    triple: PosteriorTriple
    stats: SufficientStats
    per_batch: list[VBLResult] = field(default_factory=list)
    hp: HyperParams | None = None

    @property
    def n_batches(self) -> int:
        return len(self.per_batch)


def online_exact_vbl(
    blocks: Iterable[tuple[NDArray, NDArray]],
    hp: HyperParams,
    stop: StoppingRule | None = None,
    *,
    p: int | None = None,
    hp_em: HyperParams | None = None,
    hyper=None,
    track: bool = False,
    callback: Callable[[int, PosteriorTriple, SufficientStats], None] | None = None,
) -> OnlineExactResult:
    """Assimilate ``(X_n, Y_n)`` blocks through sufficient statistics.

    The first batch starts cold; each later batch warm-starts from the
    previous converged triple.  Hyperparameters returned by a ``hyper`` hook
    are carried to the next batch.
    """
    stats: SufficientStats | None = None if p is None else SufficientStats.zeros(p)
    triple: PosteriorTriple | None = None
    results: list[VBLResult] = []
    for n, (Xb, Yb) in enumerate(blocks, start=1):
        Xb = np.atleast_2d(np.asarray(Xb, dtype=float))
        if stats is None:
            stats = SufficientStats.zeros(Xb.shape[1])
        if Xb.shape[0] == 0:
            stats_accumulate(stats, Xb, Yb)
            continue
        stats = stats_accumulate(stats, Xb, Yb)
        res = vbl_iterate_stats(stats, hp, triple, stop, hp_em=hp_em, hyper=hyper, track=track)
        triple, hp, hp_em = res.triple, res.hp, res.hp_em
        results.append(res)
        if callback is not None:
            callback(n, triple, stats)
    if stats is None:
        raise ValueError("no batches supplied")
    if triple is None:
        triple = PosteriorTriple.cold(stats.p)
    return OnlineExactResult(triple, stats, results, hp)


# --------------------------------------------------------------------------
# Approximate path


@dataclass
class LowRankState:
    """Carried state of the rank-``M`` + diagonal recursion.

    ``buffer`` is ``2M x p``; its first ``M`` rows hold ``X_hat`` and the
    remaining rows are scratch space for the next batch, so a step never
    allocates another ``2M x p`` array.
    """

    buffer: NDArray
    mu_star: NDArray
    m_star: NDArray
    C_diag: NDArray
    inv_theta_vbem: NDArray
    inv_theta_em: NDArray
    batch_index: int = 0
    n_seen: int = 0
    tails: list[float] = field(default_factory=list)
    frob_errors: list[float] = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.buffer.shape[0] // 2

    @property
    def p(self) -> int:
        return self.buffer.shape[1]

    @property
    def X_hat(self) -> NDArray:
        return self.buffer[: self.M]

    def view(self) -> PosteriorTriple:
        return PosteriorTriple(self.mu_star, self.m_star, None, self.C_diag)

    def covariance(self):
        raise CovarianceUnavailableError("only diag(C) is stored on the rank-M + diagonal path")


def _pad_block(buf: NDArray, X_new: NDArray, M: int) -> int:
    k = X_new.shape[0]
    if k > M:
        raise ValueError(f"batch has {k} rows but M={M}")
    buf[M : M + k] = X_new
    buf[M + k :] = 0.0
    return k


def _compress(state: LowRankState, chunk: int) -> None:
    M = state.M
    try:
        rr = reduced_rank_eig(state.buffer, M, chunk=chunk, out=state.buffer[:M])
    except np.linalg.LinAlgError as exc:
        raise CompressionError(f"eigendecomposition failed: {exc}", state.batch_index) from exc
    state.buffer[M:] = 0.0
    state.tails.append(rr.tail)
    state.frob_errors.append(rr.frob_error)
    if not np.all(np.isfinite(state.X_hat)):
        raise CompressionError("non-finite compressed rows", state.batch_index)


def _init_state(X1: NDArray, Y1: NDArray, hp, hp_em, stop, M: int | None) -> tuple[LowRankState, VBLResult]:
    k, p = X1.shape
    M = k if M is None else M
    buf = np.zeros((2 * M, p))
    _pad_block(buf, X1, M)
    buf[:M] = buf[M:]
    buf[M:] = 0.0
    Y_pad = np.zeros(M)
    Y_pad[:k] = Y1
    res = vbl_iterate(buf[:M], Y_pad, hp, None, stop, form="dual", hp_em=hp_em, track=False, cov="diag")
    tr = res.triple
    hp_em = res.hp_em
    state = LowRankState(
        buf,
        tr.mu,
        tr.m,
        tr.C_diag,
        vbem_theta_update(tr.m, tr.C_diag, res.hp),
        em_theta_update(tr.mu, hp_em),
        batch_index=1,
        n_seen=k,
    )
    state.tails.append(0.0)
    state.frob_errors.append(0.0)
    return state, res


@dataclass
class _StepInfo:
    n_inner: int
    misfit: float
    misfit_mu: float
    delta: float


def online_approx_step(
    state: LowRankState | None,
    X_new: NDArray,
    Y_new: NDArray,
    hp: HyperParams,
    stop: StoppingRule | None = None,
    *,
    hp_em: HyperParams | None = None,
    M: int | None = None,
    chunk: int = 8192,
) -> tuple[LowRankState, PosteriorTriple]:
    """Assimilate one batch into the rank-``M`` + diagonal state (in place).

    ``state=None`` starts the recursion: ``X_hat`` is the first batch itself
    (``M`` defaults to its row count) and the full coupled iteration is run
    on it.  Later batches may be shorter than ``M``; they are padded with
    zero rows and zero labels.  ``stop.max_iter`` bounds the inner loop.
    """
    hp_em = hp if hp_em is None else hp_em
    stop = StoppingRule() if stop is None else stop
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    Y_new = np.asarray(Y_new, dtype=float).ravel()
    if X_new.shape[0] != Y_new.size:
        raise ValueError(f"X has {X_new.shape[0]} rows but Y has {Y_new.size} entries")
    if state is None:
        state, _ = _init_state(X_new, Y_new, hp, hp_em, stop, M)
        return state, state.view()
    if X_new.shape[1] != state.p:
        raise ValueError(f"batch has {X_new.shape[1]} columns, state has p={state.p}")

    Mk = state.M
    buf = state.buffer
    k = _pad_block(buf, X_new, Mk)
    Y_pad = np.zeros(Mk)
    Y_pad[:k] = Y_new
    Xh = state.X_hat
    Y_v = np.concatenate([Xh @ state.m_star, Y_pad])
    Y_e = np.concatenate([Xh @ state.mu_star, Y_pad])
    system = DualSystem(buf, Y_v, chunk)
    m_star, mu_star = state.m_star, state.mu_star
    m, mu, C_diag = m_star, mu_star, state.C_diag
    n_eff = Mk + k
    inv_v = inv_e = None
    for t in range(stop.max_iter):
        inv_v = vbem_theta_update(m, C_diag, hp)
        inv_e = em_theta_update(mu, hp_em)
        sv = system.solve(inv_v, hp.gamma_sq, m0=m_star, cov="diag", Y=Y_v)
        se = system.solve(inv_e, hp_em.gamma_sq, m0=mu_star, cov="none", Y=Y_e)
        delta = max(
            float(np.linalg.norm(sv.mean - m)),
            float(np.linalg.norm(se.mean - mu)),
            float(np.linalg.norm(sv.C_diag - C_diag)),
        )
        m, mu, C_diag = sv.mean, se.mean, sv.C_diag
        if stop.metric == "delta":
            done = delta <= stop.tolerance(hp.gamma, n_eff)
        else:
            mis = math.sqrt(system.sq_misfit(m, Y_v))
            mis_mu = math.sqrt(system.sq_misfit(mu, Y_e))
            done = max(mis, mis_mu) <= stop.tolerance(math.sqrt(max(hp.gamma_sq, hp_em.gamma_sq)), n_eff)
        logger.debug("batch %d inner %d delta %.3e", state.batch_index + 1, t + 1, delta)
        if done:
            break

    state.mu_star, state.m_star, state.C_diag = mu, m, C_diag
    state.inv_theta_vbem, state.inv_theta_em = inv_v, inv_e
    state.batch_index += 1
    state.n_seen += k
    _compress(state, chunk)
    return state, state.view()


@dataclass
class OnlineApproxResult:
    state: LowRankState
    history: list[dict] = field(default_factory=list)

    @property
    def triple(self) -> PosteriorTriple:
        return self.state.view()


def online_approx_vbl(
    blocks: Iterable[tuple[NDArray, NDArray]],
    hp: HyperParams,
    stop_first: StoppingRule | None = None,
    stop_inner: StoppingRule | None = None,
    *,
    hp_em: HyperParams | None = None,
    M: int | None = None,
    state: LowRankState | None = None,
    chunk: int = 8192,
    callback: Callable[[LowRankState], dict | None] | None = None,
    checkpoint: Callable[[LowRankState], None] | None = None,
) -> OnlineApproxResult:
    """Drive :func:`online_approx_step` over a stream of blocks.

    ``stop_first`` governs the full iteration on the first batch and
    ``stop_inner`` the short inner loop on every later batch.  Passing a
    loaded ``state`` resumes a run.  ``callback(state)`` may return a dict
    recorded in ``history``; ``checkpoint(state)`` is invoked after each
    batch.
    """
    stop_inner = StoppingRule(max_iter=1) if stop_inner is None else stop_inner
    history: list[dict] = []
    for Xb, Yb in blocks:
        rule = stop_first if state is None else stop_inner
        state, _ = online_approx_step(state, Xb, Yb, hp, rule, hp_em=hp_em, M=M, chunk=chunk)
        row = {"batch": state.batch_index, "n_seen": state.n_seen, "tail": state.tails[-1]}
        if callback is not None:
            extra = callback(state)
            if extra:
                row.update(extra)
        history.append(row)
        if checkpoint is not None:
            checkpoint(state)
    if state is None:
        raise ValueError("no batches supplied")
    return OnlineApproxResult(state, history)


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, state: LowRankState, hp: HyperParams | None = None) -> None:
    """Write the carried state to an ``.npz`` bundle (format version 1)."""
    extra = {}
    if hp is not None:
        extra = dict(hp_gamma_sq=hp.gamma_sq, hp_lam=hp.lam, hp_delta=hp.delta, hp_nu=hp.nu, hp_kind=hp.kind.value)
    np.savez(
        path,
        version=CHECKPOINT_VERSION,
        X_hat=state.X_hat,
        mu_star=state.mu_star,
        m_star=state.m_star,
        C_diag=state.C_diag,
        inv_theta_vbem=state.inv_theta_vbem,
        inv_theta_em=state.inv_theta_em,
        batch_index=state.batch_index,
        n_seen=state.n_seen,
        tails=np.asarray(state.tails, dtype=float),
        frob_errors=np.asarray(state.frob_errors, dtype=float),
        **extra,
    )


def load_checkpoint(path) -> tuple[LowRankState, HyperParams | None]:
    from .gig import PriorKind

    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        X_hat = z["X_hat"]
        M, p = X_hat.shape
        buf = np.zeros((2 * M, p))
        buf[:M] = X_hat
        state = LowRankState(
            buf,
            z["mu_star"].copy(),
            z["m_star"].copy(),
            z["C_diag"].copy(),
            z["inv_theta_vbem"].copy(),
            z["inv_theta_em"].copy(),
            int(z["batch_index"]),
            int(z["n_seen"]),
            list(map(float, z["tails"])),
            list(map(float, z["frob_errors"])),
        )
        hp = None
        if "hp_gamma_sq" in z.files:
            hp = HyperParams(
                float(z["hp_gamma_sq"]),
                float(z["hp_lam"]),
                float(z["hp_delta"]),
                float(z["hp_nu"]),
                PriorKind(str(z["hp_kind"])),
            )
    return state, hp
