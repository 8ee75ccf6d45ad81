"""Tempered SMC learning of state-space models with highly informative
observations."""

from .config import RunConfig, parse_config, stream_rng
from .kalman import GridPosterior, grid_posterior, kalman_loglik, kalman_loglik_batch
from .models import (
    Dataset,
    LinearModelSpec,
    ModelSpec,
    make_atan_model,
    make_linear_model,
    obs_logdensity,
    simulate,
    white_noise_inputs,
)
from .particle_filter import (
    PfResult,
    TrajectoryBundle,
    extended_logweight,
    incremental_logweight,
    loglik_given_bundle,
    resample_multinomial,
    run_bpf,
)
from .sampler import (
    Population,
    ProposalSpec,
    RunOutput,
    ThetaParticle,
    init_population,
    mh_kernel_exact,
    pmh_kernel,
    resample_population,
    run_exact_tempered_smc,
    run_pmh,
    run_tempered_smc,
)
from .tempering import (
    TemperingConfig,
    TemperingState,
    ess,
    should_terminate,
    solve_lambda,
    solve_lambda_from_increments,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GridPosterior",
    "LinearModelSpec",
    "ModelSpec",
    "PfResult",
    "Population",
    "ProposalSpec",
    "RunConfig",
    "RunOutput",
    "TemperingConfig",
    "TemperingState",
    "ThetaParticle",
    "TrajectoryBundle",
    "ess",
    "extended_logweight",
    "grid_posterior",
    "incremental_logweight",
    "init_population",
    "kalman_loglik",
    "kalman_loglik_batch",
    "loglik_given_bundle",
    "make_atan_model",
    "make_linear_model",
    "mh_kernel_exact",
    "obs_logdensity",
    "parse_config",
    "pmh_kernel",
    "resample_multinomial",
    "resample_population",
    "run_bpf",
    "run_exact_tempered_smc",
    "run_pmh",
    "run_tempered_smc",
    "should_terminate",
    "simulate",
    "solve_lambda",
    "solve_lambda_from_increments",
    "stream_rng",
    "white_noise_inputs",
]
