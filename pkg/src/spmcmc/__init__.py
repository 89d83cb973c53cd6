"""Stein Point Markov chain Monte Carlo and comparator methods."""

from .baselines import (
    AdaptiveSearchConfig,
    SvgdConfig,
    adaptive_search,
    med_run,
    mcmc_thin_run,
    sp_run,
    svgd_run,
)
from .kernels import (
    InvalidScoreError,
    PreconditionedIMQ,
    SteinKernel,
    imq_div_grad,
    imq_eval,
    imq_grad_x,
    stein_kernel_eval,
)
from .ksd import QuantisationState, ksd_of
from .mcmc import ChainState, MarkovKernelConfig, adapt_step_size, run_chain
from .metrics import ReferenceSample, energy_distance, estimate_preconditioner, jump_statistics
from .sp_mcmc import Removal, SpMcmcConfig, away_or_drop, select_init, spmcmc_run
from .targets import (
    FunctionTarget,
    GaussianMixtureTarget,
    IGARCHTarget,
    TargetModel,
    igarch_log_posterior,
    igarch_synthesize,
    two_mode_mixture,
)
from .trace import ExperimentTrace, TraceRecord

__version__ = "0.1.0"
