"""Bootstrap particle filter with full randomness recording and reweighting.

The filter stores every internal random variable of a run: all particle
states, all ancestor indices, and the squared observation residuals
``||y_t - g(x_t^n)||^2``.  Because the artificial observation noise is
isotropic Gaussian, those residuals are a sufficient statistic for the
particle weights at *any* noise variance, so a stored run can be re-weighted
under a new variance in O(N_x * T) without re-simulation.  This is what makes
the adaptive annealing solve cheap.

Multinomial resampling is mandatory: the re-weighting evaluates the density
of the recorded ancestor draws under a changed variance, which must be
nonzero for every achievable draw.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateWeightsError
from .models import Dataset, ModelSpec, obs_logdensity  # noqa: F401  (re-export convenience)

Array = np.ndarray

_LOG2PI = math.log(2.0 * math.pi)


@dataclass
class TrajectoryBundle:
    """All internal randomness of one particle filter run.

    ``states`` has shape (N_x, T, d_x); ``ancestors`` has shape (N_x, T-1)
    with ``ancestors[n, t-1]`` the index resampled at time t (1-based) to
    produce particle n at time t+1; ``residuals`` has shape (N_x, T) and holds
    the squared observation residuals.  ``lambda_gen`` is the noise variance
    the run was generated under.
    """

    states: Array
    ancestors: Array
    residuals: Array
    lambda_gen: float
    d_y: int

    def __post_init__(self):
        if self.lambda_gen <= 0:
            raise ValueError("lambda_gen must be > 0")
        n_x, T = self.residuals.shape
        if self.states.shape[:2] != (n_x, T):
            raise ValueError("states and residuals shapes disagree")
        if T > 1 and self.ancestors.shape != (n_x, T - 1):
            raise ValueError("ancestors must have shape (N_x, T-1)")
        if np.any(self.residuals < 0):
            raise ValueError("residuals must be non-negative")
        if self.ancestors.size and (
            self.ancestors.min() < 0 or self.ancestors.max() >= n_x
        ):
            raise ValueError("ancestor indices out of range")

    @property
    def n_particles(self) -> int:
        return self.residuals.shape[0]

    @property
    def T(self) -> int:
        return self.residuals.shape[1]

    def dump(self, path: str | Path) -> None:
        """Binary debug dump: header (N_x, T, d_x as little-endian u64) then
        states, ancestors, residuals row-major."""
        n_x, T = self.residuals.shape
        d_x = self.states.shape[2]
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QQQ", n_x, T, d_x))
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.ancestors, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(self.residuals, dtype="<f8").tobytes())


@dataclass
class PfResult:
    """A bundle plus the log of the unbiased likelihood estimate at its
    generation variance.  ``degenerate`` flags a run whose weights underflowed
    entirely at some step (log_z = -inf, to be rejected by MH)."""

    bundle: TrajectoryBundle
    log_z: float
    degenerate: bool = False


def _log_weights(residuals: Array, lam: float, d_y: int) -> Array:
    """Gaussian log-weights from cached squared residuals at variance lam."""
    return -0.5 * d_y * (_LOG2PI + math.log(lam)) - residuals / (2.0 * lam)


def resample_multinomial(log_weights: Array, count: int, rng: np.random.Generator) -> Array:
    """Draw ``count`` i.i.d. categorical ancestor indices from log-weights."""
    log_weights = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(log_weights)
    if not np.any(finite):
        raise DegenerateWeightsError("all resampling log-weights are -inf")
    shifted = np.exp(log_weights - log_weights[finite].max())
    shifted[~finite] = 0.0
    cdf = np.cumsum(shifted)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.random(count), side="right").astype(np.int64)


def run_bpf(
    model: ModelSpec,
    theta: Array,
    lam: float,
    data: Dataset,
    n_particles: int,
    rng: np.random.Generator,
) -> PfResult:
    """Run a bootstrap particle filter and record all its randomness.

    Resampling is multinomial at every time step.  The returned ``log_z`` is
    computed from the recorded residuals via :func:`loglik_given_bundle`, so
    the two are bit-identical by construction.
    """
    if n_particles < 2:
        raise ValueError("n_particles must be >= 2")
    if lam <= 0:
        raise ValueError("lam must be > 0")
    theta = np.asarray(theta, dtype=float)
    T, d_y = data.T, model.d_y

    batched = model.transition_batch is not None
    states = np.empty((n_particles, T, model.d_x))
    ancestors = np.empty((n_particles, max(T - 1, 0)), dtype=np.int64)
    residuals = np.empty((n_particles, T))
    degenerate = False

    if model.init_state_batch is not None:
        x = model.init_state_batch(theta, n_particles, rng)
    else:
        x = np.stack([model.init_state(theta, rng) for _ in range(n_particles)])

    inv_2lam = 1.0 / (2.0 * lam)
    for t in range(T):
        if t > 0:
            # Multinomial draw from weights prop. to exp(-r/(2*lam)); the
            # additive log-weight constant cancels in the normalization.
            r_prev = residuals[:, t - 1]
            r_min = r_prev.min()
            if np.isfinite(r_min):
                w = np.exp((r_min - r_prev) * inv_2lam)
                cdf = np.cumsum(w)
                anc = np.searchsorted(cdf, rng.random(n_particles) * cdf[-1], side="right")
                anc = np.minimum(anc, n_particles - 1)
            else:
                degenerate = True
                anc = rng.integers(0, n_particles, size=n_particles)
            ancestors[:, t - 1] = anc
            if batched:
                x = model.transition_batch(theta, x[anc], data.u[t - 1], rng)
            else:
                x = np.stack(
                    [model.transition(theta, x[a], data.u[t - 1], rng) for a in anc]
                )
        states[:, t, :] = x
        if model.observe_batch is not None:
            g_x = model.observe_batch(theta, x)
        else:
            g_x = np.stack([model.observe(theta, xi) for xi in x])
        diff = data.y[t][None, :] - g_x
        r = np.einsum("nd,nd->n", diff, diff)
        residuals[:, t] = np.where(np.isfinite(r), r, np.inf)

    bundle = TrajectoryBundle(
        states=states,
        ancestors=ancestors,
        residuals=residuals,
        lambda_gen=lam,
        d_y=d_y,
    )
    log_z = loglik_given_bundle(bundle, lam)
    return PfResult(bundle=bundle, log_z=log_z, degenerate=degenerate or log_z == -np.inf)


def loglik_given_bundle(bundle: TrajectoryBundle, lam: float) -> float:
    """Likelihood estimate of a stored run re-evaluated at variance ``lam``.

    sum_t [logsumexp_n logw_t^n - log N_x] over the cached residuals; no
    re-simulation.
    """
    if lam <= 0:
        raise ValueError("lam must be > 0")
    logw = _log_weights(bundle.residuals, lam, bundle.d_y)
    return float(np.sum(logsumexp(logw, axis=0)) - bundle.T * math.log(bundle.n_particles))


def _lambda_terms(bundle: TrajectoryBundle, lam: float) -> float:
    """The lambda-dependent part of the extended-space log-weight.

    Likelihood factor sum_t logsumexp_n logw_t^n plus the log-probabilities of
    the recorded ancestor draws under variance lam.  Shares the stacked code
    path so single-bundle and population evaluations agree bit-exactly.
    """
    return float(
        stacked_lambda_terms(
            bundle.residuals[None], bundle.ancestors[None], bundle.d_y, lam
        )[0]
    )


def extended_logweight(
    bundle: TrajectoryBundle, theta: Array, lam: float, log_prior
) -> float:
    """Un-normalized log-density of the extended-space target at (theta, bundle).

    Combines the prior, the product of per-time weight sums, and the density
    of the recorded ancestor draws, all evaluated at variance ``lam``.
    Returns -inf when the weights underflow entirely (degenerate, MH rejects).
    """
    if lam <= 0:
        raise ValueError("lam must be > 0")
    lp = log_prior(np.asarray(theta, dtype=float))
    if not np.isfinite(lp):
        return -np.inf
    terms = _lambda_terms(bundle, lam)
    return lp + terms if np.isfinite(terms) else -np.inf


def incremental_logweight(
    bundle: TrajectoryBundle,
    theta: Array,
    lam_new: float,
    lam_old: float,
    log_prior=None,
) -> float:
    """Log of the annealing incremental weight for one bundle.

    Equal to ``extended_logweight(lam_new) - extended_logweight(lam_old)``;
    the prior cancels analytically so only the lambda-dependent terms are
    evaluated.  ``log_prior`` is accepted for signature symmetry and ignored.
    """
    if lam_new <= 0 or lam_old <= 0:
        raise ValueError("variances must be > 0")
    if lam_new == lam_old:
        return 0.0
    new = _lambda_terms(bundle, lam_new)
    old = _lambda_terms(bundle, lam_old)
    if not np.isfinite(new) and not np.isfinite(old):
        return -np.inf
    return new - old


def run_bpf_population(
    model: ModelSpec,
    thetas: Array,
    lam: float,
    data: Dataset,
    n_particles: int,
    rng: np.random.Generator,
) -> "PopulationPfResult":
    """Run one bootstrap filter per parameter vector, all time-stepped together.

    Requires the model's population-stacked hooks (``transition_cloud`` etc.).
    Statistically identical to J independent :func:`run_bpf` calls; used by the
    outer sampler so one MH sweep costs one vectorized pass instead of J
    Python-level filter runs.
    """
    if n_particles < 2:
        raise ValueError("n_particles must be >= 2")
    if lam <= 0:
        raise ValueError("lam must be > 0")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    J = thetas.shape[0]
    T, d_y = data.T, model.d_y

    if model.population_kernel is not None:
        return _run_population_compiled(model, thetas, lam, data, n_particles, rng)

    states = np.empty((J, T, n_particles, model.d_x))
    ancestors = np.empty((J, max(T - 1, 0), n_particles), dtype=np.int64)
    residuals = np.empty((J, T, n_particles))
    degenerate = np.zeros(J, dtype=bool)
    row_offset = (np.arange(J) * n_particles)[:, None]
    row_shift = np.arange(J)[:, None].astype(float)

    X = model.init_state_cloud(thetas, n_particles, rng)
    inv_2lam = 1.0 / (2.0 * lam)
    # Running sum of logsumexp_n(-r/(2*lam)) per row, accumulated from the
    # same shifted weights the resampler needs anyway.
    z_acc = np.zeros(J)

    def _accumulate(r_slice):
        r_min = r_slice.min(axis=1, keepdims=True)
        bad = ~np.isfinite(r_min[:, 0])
        w = np.exp((r_min - r_slice) * inv_2lam)
        if np.any(bad):
            w[bad] = 1.0  # uniform fallback for fully-degenerate rows
        tot = w.sum(axis=1)
        contrib = -r_min[:, 0] * inv_2lam + np.log(tot)
        contrib[bad] = -np.inf
        z_acc[:] = z_acc + contrib
        return w, bad

    for t in range(T):
        if t > 0:
            w, bad = _accumulate(residuals[:, t - 1])
            degenerate |= bad
            cdf = np.cumsum(w, axis=1)
            # One flat searchsorted: row i's normalized cdf occupies (i, i+1].
            flat_cdf = (cdf / cdf[:, -1:] + row_shift).ravel()
            flat_u = (rng.random((J, n_particles)) + row_shift).ravel()
            anc = np.searchsorted(flat_cdf, flat_u, side="right").reshape(J, n_particles)
            anc = np.minimum(anc - row_offset, n_particles - 1)
            ancestors[:, t - 1] = anc
            X = np.take_along_axis(X, anc[:, :, None], axis=1)
            X = model.transition_cloud(thetas, X, data.u[t - 1], rng)
        states[:, t] = X
        g_x = model.observe_cloud(thetas, X)
        diff = data.y[t][None, None, :] - g_x
        r = np.einsum("jnd,jnd->jn", diff, diff)
        residuals[:, t] = np.where(np.isfinite(r), r, np.inf)

    _accumulate(residuals[:, T - 1])
    log_z = (
        z_acc
        - 0.5 * d_y * T * (_LOG2PI + math.log(lam))
        - T * math.log(n_particles)
    )
    return PopulationPfResult(
        states=states,
        ancestors=ancestors,
        residuals=residuals,
        lambda_gen=lam,
        d_y=d_y,
        log_z=log_z,
        degenerate=degenerate | (log_z == -np.inf),
    )


def _run_population_compiled(
    model: ModelSpec,
    thetas: Array,
    lam: float,
    data: Dataset,
    n_particles: int,
    rng: np.random.Generator,
) -> "PopulationPfResult":
    """Population filter via a model's compiled kernel.

    All randomness is pre-drawn from ``rng`` (initial states, transition
    noise, resampling uniforms, in that order), so the run is deterministic
    given the stream.
    """
    J = thetas.shape[0]
    T, d_x, d_y = data.T, model.d_x, model.d_y

    init = np.ascontiguousarray(model.init_state_cloud(thetas, n_particles, rng))
    normals = rng.standard_normal((J, max(T - 1, 0), n_particles, d_x))
    uniforms = rng.random((J, max(T - 1, 0), n_particles))

    states = np.empty((J, T, n_particles, d_x))
    ancestors = np.empty((J, max(T - 1, 0), n_particles), dtype=np.int64)
    residuals = np.empty((J, T, n_particles))
    z_acc = np.empty(J)
    degenerate = np.zeros(J, dtype=np.bool_)
    model.population_kernel(
        thetas, data.u, data.y, lam, init, normals, uniforms,
        states, ancestors, residuals, z_acc, degenerate,
    )
    log_z = z_acc - 0.5 * d_y * T * (_LOG2PI + math.log(lam)) - T * math.log(n_particles)
    return PopulationPfResult(
        states=states,
        ancestors=ancestors,
        residuals=residuals,
        lambda_gen=lam,
        d_y=d_y,
        log_z=log_z,
        degenerate=degenerate | (log_z == -np.inf),
    )


@dataclass
class PopulationPfResult:
    """Stacked outcome of :func:`run_bpf_population`: one filter run per row.

    Arrays are time-major for locality: ``states`` (J, T, N_x, d_x),
    ``ancestors`` (J, T-1, N_x), ``residuals`` (J, T, N_x).  ``extract(j)``
    copies row j out into a standalone particle-major :class:`PfResult` so
    accepted proposals do not pin the full stacked arrays in memory.
    """

    states: Array
    ancestors: Array
    residuals: Array
    lambda_gen: float
    d_y: int
    log_z: Array
    degenerate: Array

    def extract(self, j: int) -> PfResult:
        bundle = TrajectoryBundle(
            states=self.states[j].transpose(1, 0, 2).copy(),
            ancestors=self.ancestors[j].T.copy(),
            residuals=self.residuals[j].T.copy(),
            lambda_gen=self.lambda_gen,
            d_y=self.d_y,
        )
        return PfResult(
            bundle=bundle,
            log_z=loglik_given_bundle(bundle, self.lambda_gen),
            degenerate=bool(self.degenerate[j]),
        )


def stacked_lambda_likelihood(residuals: Array, d_y: int, lam: float) -> Array:
    """Stacked likelihood estimates: sum_t [logsumexp_n logw - log N_x] per row."""
    J, n_x, T = residuals.shape
    logw = -0.5 * d_y * (_LOG2PI + math.log(lam)) - residuals / (2.0 * lam)
    return logsumexp(logw, axis=1).sum(axis=1) - T * math.log(n_x)


def has_cloud_hooks(model: ModelSpec) -> bool:
    return (
        model.transition_cloud is not None
        and model.observe_cloud is not None
        and model.init_state_cloud is not None
    )


def stacked_lambda_terms(
    residuals: Array, ancestors: Array, d_y: int, lam: float
) -> Array:
    """Vectorized :func:`_lambda_terms` over a stack of same-shape bundles.

    ``residuals`` has shape (J, N_x, T), ``ancestors`` shape (J, N_x, T-1).
    Returns a length-J array.  Used inside the annealing bisection where the
    same population is re-evaluated at many candidate variances.
    """
    J, n_x, T = residuals.shape
    logw = -0.5 * d_y * (_LOG2PI + math.log(lam)) - residuals / (2.0 * lam)
    norms = logsumexp(logw, axis=1)  # (J, T)
    total = norms.sum(axis=1)
    if T > 1:
        picked = np.take_along_axis(logw[:, :, : T - 1], ancestors, axis=1)
        total = total + picked.sum(axis=(1, 2)) - n_x * norms[:, : T - 1].sum(axis=1)
    bad = ~np.all(np.isfinite(norms), axis=1)
    total[bad] = -np.inf
    return total
