"""Variational Bayesian LASSO: coupled EM/VBEM iterations for sparse linear models.

The main entry points are :func:`vbl_iterate` for dense problems, the online
drivers in :mod:`sparsevb.online`, the hyperparameter tuners in
:mod:`sparsevb.hyper` and the total-variation operators in
:mod:`sparsevb.tvop`.
"""

from .data import TabularDataset, kfold_rmse, load_csv, standardize
from .experiments import ExperimentConfig, run_experiment
from .gaussian import IllConditionedError, SufficientStats, kalman_step, posterior, reduced_rank_eig
from .gig import GigParams, PriorKind, cond_inv_theta, cond_theta, log_gig_normalizer
from .hyper import (
    TuneResult,
    dirac_lambda_update,
    gamma_sq_update,
    lambda_update,
    product_log,
    tune_dirac_em,
    tune_interleaved,
    tune_nested,
)
from .online import (
    BatchPlan,
    BatchStrategy,
    LowRankState,
    make_batches,
    online_approx_step,
    online_approx_vbl,
    online_exact_vbl,
)
from .tvop import BlurSpec, TvOperator, fourier_truncate, relative_error, shepp_logan
from .vbl import (
    HyperParams,
    PosteriorTriple,
    StoppingRule,
    VBLResult,
    credible_flags,
    elbo,
    vbl_iterate,
    vbl_iterate_stats,
)

__version__ = "0.1.0"

__all__ = [
    "BatchPlan",
    "BatchStrategy",
    "BlurSpec",
    "ExperimentConfig",
    "GigParams",
    "HyperParams",
    "IllConditionedError",
    "LowRankState",
    "PosteriorTriple",
    "PriorKind",
    "StoppingRule",
    "SufficientStats",
    "TabularDataset",
    "TuneResult",
    "TvOperator",
    "VBLResult",
    "cond_inv_theta",
    "cond_theta",
    "credible_flags",
    "dirac_lambda_update",
    "elbo",
    "fourier_truncate",
    "gamma_sq_update",
    "kalman_step",
    "kfold_rmse",
    "lambda_update",
    "load_csv",
    "log_gig_normalizer",
    "make_batches",
    "online_approx_step",
    "online_approx_vbl",
    "online_exact_vbl",
    "posterior",
    "product_log",
    "reduced_rank_eig",
    "relative_error",
    "run_experiment",
    "shepp_logan",
    "standardize",
    "tune_dirac_em",
    "tune_interleaved",
    "tune_nested",
    "vbl_iterate",
    "vbl_iterate_stats",
]
