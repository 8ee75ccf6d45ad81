"""State-space model abstraction, artificial-noise density, and the two test models.

A model is a stochastic transition, a deterministic observation map and a
parameter prior.  Observation noise is never part of the model itself: the
inference engine injects an artificial Gaussian noise of variance ``lam``
through :func:`obs_logdensity` and anneals it towards zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import SimulationDivergenceError

try:  # compiled population-filter kernels; optional acceleration
    from .fastpath import KERNELS as _FAST_KERNELS
except ImportError:
    _FAST_KERNELS = {}

Array = np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """A nonlinear state-space model with deterministic observations.

    ``transition(theta, x, u, rng)`` draws the next state, ``observe(theta, x)``
    maps a state to a noise-free observation, ``init_state(theta, rng)`` draws
    the initial state.  ``log_prior`` must be finite on every point
    ``sample_prior`` can produce.
    """

    name: str
    d_x: int
    d_y: int
    d_theta: int
    d_u: int
    transition: Callable[[Array, Array, Array, np.random.Generator], Array]
    observe: Callable[[Array, Array], Array]
    init_state: Callable[[Array, np.random.Generator], Array]
    log_prior: Callable[[Array], float]
    sample_prior: Callable[[np.random.Generator], Array]
    # Batched variants over a whole particle cloud; the particle filter falls
    # back to per-particle loops when these are None.
    transition_batch: Callable[[Array, Array, Array, np.random.Generator], Array] | None = None
    observe_batch: Callable[[Array, Array], Array] | None = None
    init_state_batch: Callable[[Array, int, np.random.Generator], Array] | None = None
    # Population-stacked variants: J parameter vectors, each with its own
    # cloud of N particles, shapes (J, N, d_x) with thetas (J, d_theta).
    # These let the sampler run all inner filters of an MH sweep at once.
    transition_cloud: Callable[[Array, Array, Array, np.random.Generator], Array] | None = None
    observe_cloud: Callable[[Array, Array], Array] | None = None
    init_state_cloud: Callable[[Array, int, np.random.Generator], Array] | None = None
    # Compiled whole-filter kernel (see fastpath module); used by the
    # population filter when present, numpy fallback otherwise.
    population_kernel: Callable | None = None

    def __post_init__(self):
        for f_name in ("d_x", "d_y", "d_theta"):
            if getattr(self, f_name) < 1:
                raise ValueError(f"{f_name} must be >= 1")


@dataclass(frozen=True)
class LinearModelSpec(ModelSpec):
    """A linear-Gaussian special case exposing its system matrices.

    ``system(theta)`` returns ``(A, B, C)`` for
    ``x' = A x + B u + v, v ~ N(0, Q)`` and ``y = C x``.  The exact-inference
    module requires this interface.
    """

    system: Callable[[Array], tuple[Array, Array, Array]] = None
    process_cov: Array = None
    init_mean: Array = None
    init_cov: Array = None


@dataclass
class Dataset:
    """Measured data: inputs ``u`` of shape (T, d_u), observations ``y`` of
    shape (T, d_y), and optionally the true states/parameters when synthetic."""

    u: Array
    y: Array
    x: Array | None = None
    theta_true: Array | None = None

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.u.shape[0] != self.y.shape[0]:
            raise ValueError("inputs and observations must have identical length")
        if self.u.shape[0] < 1:
            raise ValueError("horizon T must be >= 1")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.y))):
            raise ValueError("all dataset entries must be finite")

    @property
    def T(self) -> int:
        return self.u.shape[0]

    def to_csv(self, path: str | Path) -> None:
        """Write `t,u_1..u_du,y_1..y_dy` rows at full double precision."""
        d_u, d_y = self.u.shape[1], self.y.shape[1]
        header = ["t"]
        header += [f"u_{i + 1}" for i in range(d_u)]
        header += [f"y_{i + 1}" for i in range(d_y)]
        lines = [",".join(header)]
        for t in range(self.T):
            row = [str(t + 1)]
            row += [format(v, ".17g") for v in self.u[t]]
            row += [format(v, ".17g") for v in self.y[t]]
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        raw = Path(path).read_text().strip().splitlines()
        header = raw[0].split(",")
        d_u = sum(1 for h in header if h.startswith("u_"))
        d_y = sum(1 for h in header if h.startswith("y_"))
        body = np.array([[float(v) for v in line.split(",")] for line in raw[1:]])
        return cls(u=body[:, 1 : 1 + d_u], y=body[:, 1 + d_u : 1 + d_u + d_y])


def obs_logdensity(y: Array, g_x: Array, lam: float) -> float:
    """Log-density of an isotropic Gaussian observation: log N(y; g_x, lam*I).

    ``lam`` must be strictly positive here; the noise-free limit is handled by
    the exact-inference code paths only.
    """
    if lam <= 0:
        raise ValueError("lam must be > 0")
    diff = np.asarray(y, dtype=float) - np.asarray(g_x, dtype=float)
    d_y = diff.size
    return -0.5 * d_y * math.log(2.0 * math.pi * lam) - float(diff @ diff) / (2.0 * lam)


def white_noise_inputs(d_u: int = 1) -> Callable[[int, np.random.Generator], Array]:
    """Input policy drawing i.i.d. standard Gaussian inputs."""

    def policy(T: int, rng: np.random.Generator) -> Array:
        return rng.standard_normal((T, d_u))

    return policy


def simulate(
    model: ModelSpec,
    theta: Array,
    T: int,
    input_policy: Callable[[int, np.random.Generator], Array] | None = None,
    seed: int = 0,
) -> Dataset:
    """Simulate a noise-free dataset of horizon ``T`` from ``model`` at ``theta``.

    Observations are exactly ``observe(theta, x_t)``; all randomness flows from
    ``seed`` so identical seeds give bit-identical datasets.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    theta = np.asarray(theta, dtype=float)
    if not np.isfinite(model.log_prior(theta)):
        raise ValueError("theta lies outside the prior support")
    if input_policy is None:
        input_policy = white_noise_inputs(model.d_u)
    rng = np.random.default_rng(seed)
    u = np.atleast_2d(input_policy(T, rng))
    x = np.empty((T, model.d_x))
    y = np.empty((T, model.d_y))
    x[0] = model.init_state(theta, rng)
    for t in range(T):
        if t > 0:
            x[t] = model.transition(theta, x[t - 1], u[t - 1], rng)
        if not np.all(np.isfinite(x[t])):
            raise SimulationDivergenceError(t + 1)
        y[t] = model.observe(theta, x[t])
    return Dataset(u=u, y=y, x=x, theta_true=theta.copy())


def _uniform_box_prior(lo: Array, hi: Array):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    log_vol = float(np.sum(np.log(hi - lo)))

    def log_prior(theta: Array) -> float:
        theta = np.asarray(theta, dtype=float)
        if np.all(theta >= lo) and np.all(theta <= hi):
            return -log_vol
        return -np.inf

    def sample_prior(rng: np.random.Generator) -> Array:
        return rng.uniform(lo, hi)

    return log_prior, sample_prior


def make_linear_model(prior_lo=(-2.5, -2.5), prior_hi=(2.5, 2.5)) -> LinearModelSpec:
    """Two-state linear-Gaussian test model.

    ``x' = [[1, th1], [0, 0.1]] x + [th2, 0]' u + v`` with ``v ~ N(0, I_2)``
    and observation ``y = x_1``.  The prior is uniform on the given box;
    the default box contains the generating values (0.8, -1).
    """
    log_prior, sample_prior = _uniform_box_prior(prior_lo, prior_hi)

    def system(theta):
        a = np.array([[1.0, theta[0]], [0.0, 0.1]])
        b = np.array([[theta[1]], [0.0]])
        c = np.array([[1.0, 0.0]])
        return a, b, c

    def transition(theta, x, u, rng):
        a, b, c = system(theta)
        return a @ x + b @ np.atleast_1d(u) + rng.standard_normal(2)

    def observe(theta, x):
        return np.array([x[0]])

    def init_state(theta, rng):
        return rng.standard_normal(2)

    def transition_batch(theta, X, u, rng):
        a, b, c = system(theta)
        drift = (b @ np.atleast_1d(u)).reshape(1, 2)
        return X @ a.T + drift + rng.standard_normal(X.shape)

    def observe_batch(theta, X):
        return X[:, :1]

    def init_state_batch(theta, n, rng):
        return rng.standard_normal((n, 2))

    def transition_cloud(thetas, X, u, rng):
        u0 = float(np.atleast_1d(u)[0])
        out = np.einsum("jab,jnb->jna", _cloud_a(thetas), X)
        out[:, :, 0] += thetas[:, 1][:, None] * u0
        return out + rng.standard_normal(X.shape)

    def _cloud_a(thetas):
        J = thetas.shape[0]
        A = np.zeros((J, 2, 2))
        A[:, 0, 0] = 1.0
        A[:, 0, 1] = thetas[:, 0]
        A[:, 1, 1] = 0.1
        return A

    def observe_cloud(thetas, X):
        return X[:, :, :1]

    def init_state_cloud(thetas, n, rng):
        return rng.standard_normal((thetas.shape[0], n, 2))

    return LinearModelSpec(
        name="linear",
        d_x=2,
        d_y=1,
        d_theta=2,
        d_u=1,
        transition=transition,
        observe=observe,
        init_state=init_state,
        log_prior=log_prior,
        sample_prior=sample_prior,
        transition_batch=transition_batch,
        observe_batch=observe_batch,
        init_state_batch=init_state_batch,
        transition_cloud=transition_cloud,
        observe_cloud=observe_cloud,
        init_state_cloud=init_state_cloud,
        population_kernel=_FAST_KERNELS.get("linear"),
        system=system,
        process_cov=np.eye(2),
        init_mean=np.zeros(2),
        init_cov=np.eye(2),
    )


def make_atan_model(prior_lo=(0.0, 0.0), prior_hi=(3.0, 3.0)) -> ModelSpec:
    """Scalar nonlinear test model.

    Transition ``x' = atan(x) + th1 * u + v`` with ``v ~ N(0, 1)`` and
    observation ``y = |x| + th1 * th2``.  Small measurement noise is realized
    by running the engine down to a small lambda target, not inside the
    observation map.
    """
    log_prior, sample_prior = _uniform_box_prior(prior_lo, prior_hi)

    def transition(theta, x, u, rng):
        return np.arctan(x) + theta[0] * np.atleast_1d(u) + rng.standard_normal(1)

    def observe(theta, x):
        return np.abs(x) + theta[0] * theta[1]

    def init_state(theta, rng):
        return rng.standard_normal(1)

    def transition_batch(theta, X, u, rng):
        return np.arctan(X) + theta[0] * float(np.atleast_1d(u)[0]) + rng.standard_normal(X.shape)

    def observe_batch(theta, X):
        return np.abs(X) + theta[0] * theta[1]

    def init_state_batch(theta, n, rng):
        return rng.standard_normal((n, 1))

    def transition_cloud(thetas, X, u, rng):
        u0 = float(np.atleast_1d(u)[0])
        return np.arctan(X) + thetas[:, 0, None, None] * u0 + rng.standard_normal(X.shape)

    def observe_cloud(thetas, X):
        return np.abs(X) + (thetas[:, 0] * thetas[:, 1])[:, None, None]

    def init_state_cloud(thetas, n, rng):
        return rng.standard_normal((thetas.shape[0], n, 1))

    return ModelSpec(
        name="atan",
        d_x=1,
        d_y=1,
        d_theta=2,
        d_u=1,
        transition=transition,
        observe=observe,
        init_state=init_state,
        log_prior=log_prior,
        sample_prior=sample_prior,
        transition_batch=transition_batch,
        observe_batch=observe_batch,
        init_state_batch=init_state_batch,
        transition_cloud=transition_cloud,
        observe_cloud=observe_cloud,
        init_state_cloud=init_state_cloud,
        population_kernel=_FAST_KERNELS.get("atan"),
    )
