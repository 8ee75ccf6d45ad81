"""Outer samplers: the annealed SMC sampler (particle-filter and exact
variants), the particle Metropolis-Hastings rejuvenation kernel, population
resampling and initialization, plus a standalone PMH baseline chain.

All randomness flows from one master seed through named streams keyed by
(tempering step, particle index, purpose), so results are bit-identical for
any worker count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig, stream_rng
from .errors import InitializationFailureError, ResamplingCollapseError
from .kalman import kalman_loglik_batch
from .models import Dataset, LinearModelSpec, ModelSpec
from .particle_filter import (
    TrajectoryBundle,
    has_cloud_hooks,
    loglik_given_bundle,
    resample_multinomial,
    run_bpf,
    run_bpf_population,
    stacked_lambda_terms,
)
from .tempering import (
    TemperingState,
    should_terminate,
    solve_lambda,
    solve_lambda_from_increments,
)

Array = np.ndarray

logger = logging.getLogger(__name__)

# Stream purpose tags (third component of an RNG stream path).
_INIT, _RESAMPLE, _MOVE = 0, 1, 2


@dataclass
class ProposalSpec:
    """Gaussian random-walk proposal.

    With ``adapt`` on, the covariance is rescaled each annealing step to
    (2.38^2 / d) times the population covariance (standard optimal-scaling
    heuristic); otherwise the per-parameter ``scales`` are used as standard
    deviations throughout.
    """

    scales: Array
    adapt: bool = True
    _chol: Array | None = field(default=None, repr=False)

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=float)
        if np.any(self.scales <= 0):
            raise ValueError("proposal scales must be strictly positive")

    def update_from_population(self, thetas: Array) -> None:
        if not self.adapt or thetas.shape[0] < 2:
            return
        d = thetas.shape[1]
        cov = np.cov(thetas.T).reshape(d, d) * (2.38**2 / d)
        cov += 1e-12 * np.eye(d)
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            self._chol = None

    def sample(self, theta: Array, rng: np.random.Generator) -> Array:
        step = rng.standard_normal(theta.shape[0])
        if self._chol is not None:
            return theta + self._chol @ step
        return theta + self.scales * step


@dataclass
class ThetaParticle:
    """One outer sample: a parameter vector, its trajectory bundle, and the
    likelihood estimate cached at the population's current variance."""

    theta: Array
    bundle: TrajectoryBundle
    log_z: float
    log_prior: float


@dataclass
class Population:
    particles: list[ThetaParticle]
    lam: float
    step: int = 0

    def __post_init__(self):
        if len(self.particles) < 2:
            raise ValueError("population needs at least 2 particles")

    @property
    def n(self) -> int:
        return len(self.particles)

    def thetas(self) -> Array:
        return np.stack([p.theta for p in self.particles])

    def bundles(self) -> list[TrajectoryBundle]:
        return [p.bundle for p in self.particles]


@dataclass
class StepRecord:
    p: int
    lam: float
    ess: float
    accept_rate: float


@dataclass
class RunOutput:
    """Final samples plus the full annealing history and diagnostics."""

    samples: Array
    schedule: list[StepRecord]
    termination_reason: list[str]
    final_lambda: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def lambda_history(self) -> list[float]:
        return [rec.lam for rec in self.schedule]


def pmh_kernel(
    particle: ThetaParticle,
    lam: float,
    model: ModelSpec,
    data: Dataset,
    proposal: ProposalSpec,
    n_x: int,
    rng: np.random.Generator,
) -> tuple[ThetaParticle, bool]:
    """One particle Metropolis-Hastings move on the extended space.

    Proposes theta', runs a fresh particle filter at (theta', lam), and
    accepts the pair (theta', bundle') with the likelihood-estimate ratio.
    A degenerate estimate (z' = 0) auto-rejects.
    """
    theta_new = proposal.sample(particle.theta, rng)
    lp_new = model.log_prior(theta_new)
    # Draw the acceptance uniform unconditionally to keep streams aligned.
    u = rng.random()
    if not np.isfinite(lp_new):
        return particle, False
    pf = run_bpf(model, theta_new, lam, data, n_x, rng)
    log_ratio = (pf.log_z + lp_new) - (particle.log_z + particle.log_prior)
    if math.log(u) < log_ratio:
        return ThetaParticle(theta_new, pf.bundle, pf.log_z, lp_new), True
    return particle, False


def mh_kernel_exact(
    theta: Array,
    loglik: float,
    lam: float,
    model: LinearModelSpec,
    data: Dataset,
    proposal: ProposalSpec,
    rng: np.random.Generator,
) -> tuple[Array, float, bool]:
    """One exact-likelihood Metropolis-Hastings move (Kalman filter inside)."""
    theta_new = proposal.sample(theta, rng)
    lp_old = model.log_prior(theta)
    lp_new = model.log_prior(theta_new)
    u = rng.random()
    if not np.isfinite(lp_new):
        return theta, loglik, False
    ll_new = float(kalman_loglik_batch(model, theta_new[None, :], lam, data)[0])
    if math.log(u) < (ll_new + lp_new) - (loglik + lp_old):
        return theta_new, ll_new, True
    return theta, loglik, False


def _pmh_sweep_vectorized(
    particles: list[ThetaParticle],
    lam: float,
    model: ModelSpec,
    data: Dataset,
    proposal: ProposalSpec,
    n_x: int,
    rng: np.random.Generator,
) -> tuple[list[ThetaParticle], int]:
    """One PMH move for every particle, with all inner filters run as a single
    stacked pass.  Statistically the same as looping pmh_kernel."""
    J = len(particles)
    cur = np.stack([p.theta for p in particles])
    steps = rng.standard_normal(cur.shape)
    if proposal._chol is not None:
        prop = cur + steps @ proposal._chol.T
    else:
        prop = cur + proposal.scales * steps
    u = rng.random(J)
    lp_new = np.array([model.log_prior(th) for th in prop])
    in_support = np.isfinite(lp_new)
    accepted = 0
    if np.any(in_support):
        res = run_bpf_population(model, prop[in_support], lam, data, n_x, rng)
        for k, j in enumerate(np.flatnonzero(in_support)):
            log_ratio = (res.log_z[k] + lp_new[j]) - (
                particles[j].log_z + particles[j].log_prior
            )
            if math.log(u[j]) < log_ratio:
                pf = res.extract(k)
                particles[j] = ThetaParticle(prop[j], pf.bundle, pf.log_z, lp_new[j])
                accepted += 1
    return particles, accepted


def init_population(
    model: ModelSpec, data: Dataset, cfg: RunConfig, master_seed: int | None = None
) -> Population:
    """Draw prior samples, attach fresh bundles at lambda0, and warm each
    particle with a short PMH chain so the population approximately targets
    the posterior at lambda0."""
    seed = cfg.seed if master_seed is None else master_seed
    proposal = ProposalSpec(scales=np.asarray(cfg.proposal_scales), adapt=False)
    lam0 = cfg.lambda0

    if has_cloud_hooks(model):
        rng = stream_rng(seed, 0, 0, _INIT)
        thetas = np.stack([model.sample_prior(rng) for _ in range(cfg.n_theta)])
        res = run_bpf_population(model, thetas, lam0, data, cfg.n_x, rng)
        particles = []
        for j in range(cfg.n_theta):
            pf = res.extract(j)
            particles.append(
                ThetaParticle(thetas[j], pf.bundle, pf.log_z, model.log_prior(thetas[j]))
            )
        del res
        for _ in range(cfg.warm_moves):
            particles, _acc = _pmh_sweep_vectorized(
                particles, lam0, model, data, proposal, cfg.n_x, rng
            )
    else:

        def build(j: int) -> ThetaParticle:
            rng = stream_rng(seed, 0, j, _INIT)
            theta = model.sample_prior(rng)
            pf = run_bpf(model, theta, lam0, data, cfg.n_x, rng)
            particle = ThetaParticle(theta, pf.bundle, pf.log_z, model.log_prior(theta))
            for _ in range(cfg.warm_moves):
                particle, _acc = pmh_kernel(
                    particle, lam0, model, data, proposal, cfg.n_x, rng
                )
            return particle

        particles = _particle_map(build, range(cfg.n_theta), cfg.threads)

    if all(p.log_z == -np.inf for p in particles):
        raise InitializationFailureError(
            "every prior draw gave a degenerate likelihood at lambda0; increase lambda0"
        )
    return Population(particles=list(particles), lam=lam0, step=0)


def resample_population(
    pop: Population,
    incremental_log_weights: Array,
    new_lambda: float,
    rng: np.random.Generator,
) -> Population:
    """Multinomial resampling of whole (theta, bundle) pairs, with likelihood
    caches refreshed at the new variance."""
    incremental_log_weights = np.asarray(incremental_log_weights, dtype=float)
    if not np.any(np.isfinite(incremental_log_weights)):
        raise ResamplingCollapseError("all incremental weights are degenerate")
    idx = resample_multinomial(incremental_log_weights, pop.n, rng)
    particles = []
    for i in idx:
        src = pop.particles[i]
        particles.append(
            replace(src, log_z=loglik_given_bundle(src.bundle, new_lambda))
        )
    return Population(particles=particles, lam=new_lambda, step=pop.step + 1)


def _particle_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_tempered_smc(
    model: ModelSpec, data: Dataset, cfg: RunConfig, master_seed: int | None = None
) -> RunOutput:
    """The full annealed SMC sampler on the extended space.

    Loop: solve the next variance from the stored bundles, resample the
    population with the incremental weights, then rejuvenate every particle
    with K particle-MH sweeps at the new variance.  Terminates on reaching
    the target variance, on MH acceptance collapse, or at the step cap.
    """
    seed = cfg.seed if master_seed is None else master_seed
    tcfg = cfg.tempering()
    pop = init_population(model, data, cfg, seed)
    proposal = ProposalSpec(scales=np.asarray(cfg.proposal_scales), adapt=cfg.adapt_proposal)
    state = TemperingState(p=0, lam=cfg.lambda0, mh_accept_rate=1.0)
    schedule: list[StepRecord] = []
    accept_log: list[tuple[int, int]] = []  # (accepted, proposed) per step
    decay_ratio: float | None = None

    while True:
        done, reasons = should_terminate(state, tcfg)
        if done:
            break
        p = state.p + 1
        # Extrapolate last step's decrement ratio to warm-start the bracket.
        hint = pop.lam * decay_ratio if decay_ratio is not None else None
        lam_new, ess_at, _fb = solve_lambda(pop.bundles(), pop.lam, tcfg, hint=hint)
        decay_ratio = lam_new / pop.lam
        increments = _bundle_increments(pop.bundles(), lam_new, pop.lam)
        pop = resample_population(pop, increments, lam_new, stream_rng(seed, p, 0, _RESAMPLE))
        proposal.update_from_population(pop.thetas())

        if has_cloud_hooks(model):
            rng_move = stream_rng(seed, p, 0, _MOVE)
            accepted = 0
            for _ in range(cfg.K):
                pop.particles, acc = _pmh_sweep_vectorized(
                    pop.particles, lam_new, model, data, proposal, cfg.n_x, rng_move
                )
                accepted += acc
        else:

            def move(j: int) -> tuple[ThetaParticle, int]:
                rng = stream_rng(seed, p, j, _MOVE)
                particle = pop.particles[j]
                acc_j = 0
                for _ in range(cfg.K):
                    particle, acc = pmh_kernel(
                        particle, lam_new, model, data, proposal, cfg.n_x, rng
                    )
                    acc_j += acc
                return particle, acc_j

            moved = _particle_map(move, range(pop.n), cfg.threads)
            pop.particles = [m[0] for m in moved]
            accepted = sum(m[1] for m in moved)
        proposed = cfg.K * pop.n
        accept_log.append((accepted, proposed))
        accept_rate = accepted / proposed

        state = TemperingState(
            p=p,
            lam=lam_new,
            ess_achieved=ess_at,
            mh_accept_rate=accept_rate,
            lambda_history=state.lambda_history + [lam_new],
        )
        schedule.append(StepRecord(p=p, lam=lam_new, ess=ess_at, accept_rate=accept_rate))
        logger.info(
            "step %d: lambda=%.6g ess=%.1f accept=%.3f", p, lam_new, ess_at, accept_rate
        )

    return RunOutput(
        samples=pop.thetas(),
        schedule=schedule,
        termination_reason=reasons,
        final_lambda=pop.lam,
        diagnostics={"accept_log": accept_log, "n_steps": state.p},
    )


def _bundle_increments(bundles: list[TrajectoryBundle], lam_new: float, lam_old: float) -> Array:
    residuals = np.stack([b.residuals for b in bundles])
    ancestors = np.stack([b.ancestors for b in bundles])
    d_y = bundles[0].d_y
    return stacked_lambda_terms(residuals, ancestors, d_y, lam_new) - stacked_lambda_terms(
        residuals, ancestors, d_y, lam_old
    )


def run_exact_tempered_smc(
    model: LinearModelSpec, data: Dataset, cfg: RunConfig, master_seed: int | None = None
) -> RunOutput:
    """Annealed SMC with the exact Kalman likelihood in place of particle
    filters.  Only valid for linear-Gaussian models; the variance may anneal
    all the way to zero here."""
    seed = cfg.seed if master_seed is None else master_seed
    tcfg = cfg.tempering()
    rng_init = stream_rng(seed, 0, 0, _INIT)
    thetas = np.stack([model.sample_prior(rng_init) for _ in range(cfg.n_theta)])
    logliks = kalman_loglik_batch(model, thetas, cfg.lambda0, data)
    log_priors = np.array([model.log_prior(th) for th in thetas])
    proposal = ProposalSpec(scales=np.asarray(cfg.proposal_scales), adapt=cfg.adapt_proposal)

    # Warm moves so the population targets the posterior at lambda0.
    thetas, logliks, log_priors, _ = _exact_sweeps(
        model, data, thetas, logliks, log_priors, cfg.lambda0, proposal,
        cfg.warm_moves, stream_rng(seed, 0, 1, _MOVE),
    )

    state = TemperingState(p=0, lam=cfg.lambda0, mh_accept_rate=1.0)
    schedule: list[StepRecord] = []
    lam = cfg.lambda0

    while True:
        done, reasons = should_terminate(state, tcfg)
        if done:
            break
        p = state.p + 1
        base = kalman_loglik_batch(model, thetas, lam, data)

        def increment_fn(lam_new: float) -> Array:
            return kalman_loglik_batch(model, thetas, lam_new, data) - base

        lam_new, ess_at, _fb = solve_lambda_from_increments(
            increment_fn, lam, cfg.n_theta, tcfg
        )
        increments = increment_fn(lam_new)
        idx = resample_multinomial(increments, cfg.n_theta, stream_rng(seed, p, 0, _RESAMPLE))
        thetas = thetas[idx]
        logliks = kalman_loglik_batch(model, thetas, lam_new, data)
        log_priors = log_priors[idx]
        proposal.update_from_population(thetas)

        thetas, logliks, log_priors, accept_rate = _exact_sweeps(
            model, data, thetas, logliks, log_priors, lam_new, proposal,
            cfg.K, stream_rng(seed, p, 1, _MOVE),
        )
        lam = lam_new
        state = TemperingState(
            p=p, lam=lam, ess_achieved=ess_at, mh_accept_rate=accept_rate,
            lambda_history=state.lambda_history + [lam],
        )
        schedule.append(StepRecord(p=p, lam=lam, ess=ess_at, accept_rate=accept_rate))
        logger.info(
            "step %d: lambda=%.6g ess=%.1f accept=%.3f", p, lam, ess_at, accept_rate
        )

    return RunOutput(
        samples=thetas,
        schedule=schedule,
        termination_reason=reasons,
        final_lambda=lam,
        diagnostics={"n_steps": state.p},
    )


def _exact_sweeps(model, data, thetas, logliks, log_priors, lam, proposal, n_sweeps, rng):
    """K vectorized MH sweeps with the exact likelihood; one batched Kalman
    evaluation per sweep."""
    n = thetas.shape[0]
    accepted = 0
    for _ in range(n_sweeps):
        steps = rng.standard_normal(thetas.shape)
        if proposal._chol is not None:
            prop = thetas + steps @ proposal._chol.T
        else:
            prop = thetas + proposal.scales * steps
        u = rng.random(n)
        lp_new = np.array([model.log_prior(th) for th in prop])
        in_support = np.isfinite(lp_new)
        ll_new = np.full(n, -np.inf)
        if np.any(in_support):
            ll_new[in_support] = kalman_loglik_batch(model, prop[in_support], lam, data)
        log_ratio = (ll_new + lp_new) - (logliks + log_priors)
        acc = np.log(u) < log_ratio
        thetas = np.where(acc[:, None], prop, thetas)
        logliks = np.where(acc, ll_new, logliks)
        log_priors = np.where(acc, lp_new, log_priors)
        accepted += int(acc.sum())
    rate = accepted / (n_sweeps * n) if n_sweeps else 1.0
    return thetas, logliks, log_priors, rate


def run_pmh(
    model: ModelSpec,
    data: Dataset,
    lam: float,
    chain_length: int,
    proposal: ProposalSpec,
    cfg: RunConfig,
    master_seed: int | None = None,
) -> tuple[Array, float]:
    """Plain particle Metropolis-Hastings chain at a fixed variance.

    Returns exactly ``chain_length`` samples and the empirical acceptance
    rate.  Used as the comparison baseline and inside initialization.
    """
    seed = cfg.seed if master_seed is None else master_seed
    rng = stream_rng(seed, 0, 0, _MOVE)
    theta = model.sample_prior(rng)
    pf = run_bpf(model, theta, lam, data, cfg.n_x, rng)
    particle = ThetaParticle(theta, pf.bundle, pf.log_z, model.log_prior(theta))
    chain = np.empty((chain_length, model.d_theta))
    accepted = 0
    for i in range(chain_length):
        particle, acc = pmh_kernel(particle, lam, model, data, proposal, cfg.n_x, rng)
        accepted += acc
        chain[i] = particle.theta
    return chain, accepted / chain_length
