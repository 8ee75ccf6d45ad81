"""Annealing-pace control: ESS, the adaptive variance solve, and termination.

Each annealing step picks the next artificial noise variance so that the
effective sample size of the population's incremental weights hits a chosen
fraction of the population size.  The solve runs a bisection on log-variance
over the stored trajectory bundles, which makes each objective evaluation a
cheap reweighting instead of a filter re-run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateWeightsError
from .particle_filter import TrajectoryBundle, stacked_lambda_terms

Array = np.ndarray


@dataclass
class TemperingConfig:
    """Knobs for the annealing schedule.

    ``alpha`` is the target ESS fraction; ``lambda_target`` is where the
    schedule is allowed to stop (must stay > 0 for particle-filter runs).
    ``accept_floor`` terminates the run when MH mixing collapses.
    """

    alpha: float = 0.5
    lambda0: float = 10.0
    lambda_target: float = 1e-2
    accept_floor: float = 0.05
    p_max: int = 500
    ess_tol: float = 1e-2
    bisect_max_iter: int = 60
    fallback_decay: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be > 0")
        if self.lambda_target >= self.lambda0:
            raise ValueError("lambda_target must be smaller than lambda0")


@dataclass
class TemperingState:
    """Progress of the annealing loop."""

    p: int = 0
    lam: float = np.inf
    ess_achieved: float = np.nan
    mh_accept_rate: float = 1.0
    lambda_history: list = field(default_factory=list)


def ess(log_weights: Array) -> float:
    """Effective sample size of a log-weight vector, in [1, N].

    Computed from max-shifted normalized weights; invariant to adding any
    constant to all log-weights.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(log_weights)
    if not np.any(finite):
        raise DegenerateWeightsError("all log-weights are -inf")
    w = np.exp(log_weights - log_weights[finite].max())
    w[~finite] = 0.0
    s = w.sum()
    return float(s * s / np.sum(w * w))


def solve_lambda_from_increments(
    increment_fn, lam_prev: float, n_particles: int, cfg: TemperingConfig,
    hint: float | None = None,
) -> tuple[float, float, bool]:
    """Find the next variance so the incremental-weight ESS hits alpha * N.

    ``increment_fn(lam)`` must return the vector of incremental log-weights of
    moving the population from ``lam_prev`` to ``lam``.  Bisection runs on
    log-variance over [lambda_target, lam_prev].  If the ESS already exceeds
    the target at ``lambda_target`` the schedule jumps straight there.
    ``hint`` is an optional guess for the solution (e.g. extrapolated from the
    previous step) used to shrink the initial bracket.
    Returns ``(lam_new, ess_at_solution, used_fallback)``; the fallback is a
    fixed geometric decrement used when no crossing can be bracketed.
    """
    target = cfg.alpha * n_particles
    # lambda_target = 0 is legal for exact-likelihood runs; probe it directly
    # but keep the bisection bracket strictly positive.
    floor = cfg.lambda_target if cfg.lambda_target > 0 else lam_prev * 1e-15
    probe = cfg.lambda_target
    try:
        ess_lo = ess(increment_fn(probe))
    except (DegenerateWeightsError, ValueError):
        probe = floor
        ess_lo = _safe_ess(increment_fn, probe, 0.0)
    if ess_lo >= target:
        return probe, ess_lo, False

    lo_log = np.log(floor)
    hi_log = np.log(lam_prev)
    if hint is not None and floor < hint < lam_prev:
        # Walk the guess downward until it brackets the crossing from below;
        # each failed probe becomes the new upper bracket edge.
        cand_log = np.log(hint)
        for _ in range(8):
            e = _safe_ess(increment_fn, float(np.exp(cand_log)), 0.0)
            if abs(e - target) / target <= cfg.ess_tol:
                return float(np.exp(cand_log)), e, False
            if e < target:
                lo_log = cand_log
                break
            hi_log = cand_log
            cand_log = max(lo_log, cand_log + (cand_log - np.log(lam_prev)))
            if cand_log <= lo_log:
                break
    lam_mid = None
    ess_mid = None
    for _ in range(cfg.bisect_max_iter):
        mid_log = 0.5 * (lo_log + hi_log)
        lam_mid = float(np.exp(mid_log))
        try:
            ess_mid = ess(increment_fn(lam_mid))
        except DegenerateWeightsError:
            ess_mid = 0.0
        if abs(ess_mid - target) / target <= cfg.ess_tol:
            return lam_mid, ess_mid, False
        if ess_mid > target:
            hi_log = mid_log
        else:
            lo_log = mid_log
    # Bisection exhausted: accept the last midpoint unless it collapsed onto
    # the top of the bracket, in which case fall back to a fixed decrement.
    if lam_mid is not None and lam_mid < lam_prev * (1.0 - 1e-9):
        return lam_mid, ess_mid, False
    lam_fb = max(lam_prev * cfg.fallback_decay, cfg.lambda_target)
    return lam_fb, _safe_ess(increment_fn, lam_fb, 0.0), True


def _safe_ess(increment_fn, lam: float, default: float) -> float:
    try:
        return ess(increment_fn(lam))
    except (DegenerateWeightsError, ValueError):
        return default


def solve_lambda(
    bundles: list[TrajectoryBundle], lam_prev: float, cfg: TemperingConfig,
    hint: float | None = None,
) -> tuple[float, float, bool]:
    """Adaptive variance solve over a population of trajectory bundles.

    Stacks the bundles' residual and ancestor caches once and reuses them for
    every bisection evaluation.
    """
    if lam_prev <= cfg.lambda_target:
        raise ValueError("lam_prev must exceed lambda_target")
    residuals = np.stack([b.residuals for b in bundles])
    ancestors = np.stack([b.ancestors for b in bundles])
    d_y = bundles[0].d_y
    base = stacked_lambda_terms(residuals, ancestors, d_y, lam_prev)

    def increment_fn(lam: float) -> Array:
        if lam <= 0:
            raise ValueError("lam must be > 0 for bundle reweighting")
        return stacked_lambda_terms(residuals, ancestors, d_y, lam) - base

    return solve_lambda_from_increments(increment_fn, lam_prev, len(bundles), cfg, hint=hint)


def should_terminate(state: TemperingState, cfg: TemperingConfig) -> tuple[bool, list[str]]:
    """Termination decision with the list of reasons that fired."""
    reasons = []
    if state.lam <= cfg.lambda_target:
        reasons.append("target-reached")
    if state.mh_accept_rate < cfg.accept_floor:
        reasons.append("acceptance-floor")
    if state.p >= cfg.p_max:
        reasons.append("step-cap")
    return bool(reasons), reasons
