"""Exact likelihood and grid posterior for linear-Gaussian models.

These serve both as a fast inner likelihood for the exact-inference sampler
variant and as ground truth when testing the particle filter (the filter's
likelihood estimate is unbiased, so its average must match the Kalman value).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import EmptySupportError, NumericalDegeneracyError
from .models import Dataset, LinearModelSpec

Array = np.ndarray

_LOG2PI = math.log(2.0 * math.pi)


def kalman_loglik_batch(
    model: LinearModelSpec, thetas: Array, lam: float, data: Dataset
) -> Array:
    """Exact log p(y_{1:T} | theta, lam) for a batch of parameter vectors.

    Runs one Kalman filter per theta, vectorized over the batch, using the
    prediction-error decomposition.  ``lam`` is the variance of the artificial
    isotropic observation noise; ``lam = 0`` is legal as long as the innovation
    covariance ``C P C' + lam I`` stays positive definite.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = thetas.shape[0]
    d_x, d_y, T = model.d_x, model.d_y, data.T

    A = np.empty((n, d_x, d_x))
    B = np.empty((n, d_x, model.d_u))
    C = np.empty((n, d_y, d_x))
    for i, th in enumerate(thetas):
        A[i], B[i], C[i] = model.system(th)
    Q = model.process_cov
    lam_eye = lam * np.eye(d_y)

    m = np.broadcast_to(model.init_mean, (n, d_x)).copy()
    P = np.broadcast_to(model.init_cov, (n, d_x, d_x)).copy()
    eye = np.broadcast_to(np.eye(d_x), (n, d_x, d_x))
    loglik = np.zeros(n)

    for t in range(T):
        if t > 0:
            m = np.einsum("nij,nj->ni", A, m) + np.einsum("nij,j->ni", B, data.u[t - 1])
            P = A @ P @ A.transpose(0, 2, 1) + Q
            P = 0.5 * (P + P.transpose(0, 2, 1))
        S = C @ P @ C.transpose(0, 2, 1) + lam_eye
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalDegeneracyError(
                f"innovation covariance not positive definite at t={t + 1}"
            ) from exc
        v = data.y[t] - np.einsum("nij,nj->ni", C, m)
        # Solve S^{-1} v and S^{-1} C via the Cholesky factor.
        sv = np.linalg.solve(S, v[..., None])[..., 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        loglik += -0.5 * (d_y * _LOG2PI + logdet + np.einsum("ni,ni->n", v, sv))
        K = np.linalg.solve(
            S.transpose(0, 2, 1), (P @ C.transpose(0, 2, 1)).transpose(0, 2, 1)
        ).transpose(0, 2, 1)
        m = m + np.einsum("nij,nj->ni", K, v)
        # Joseph form keeps P symmetric positive semidefinite at lam = 0.
        IKC = eye - K @ C
        P = IKC @ P @ IKC.transpose(0, 2, 1) + K @ lam_eye @ K.transpose(0, 2, 1)
        P = 0.5 * (P + P.transpose(0, 2, 1))
    return loglik


def kalman_loglik(model: LinearModelSpec, theta: Array, lam: float, data: Dataset) -> float:
    """Exact log-likelihood for a single parameter vector."""
    return float(kalman_loglik_batch(model, np.asarray(theta)[None, :], lam, data)[0])


@dataclass
class GridPosterior:
    """A posterior tabulated on a tensor-product parameter grid."""

    axes: list[Array]
    log_masses: Array
    masses: Array

    def mean(self) -> Array:
        """Posterior mean of each parameter."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.array([float(np.sum(g * self.masses)) for g in mesh])

    def marginal(self, axis: int) -> Array:
        """Marginal probability vector along one parameter axis."""
        other = tuple(i for i in range(self.masses.ndim) if i != axis)
        return self.masses.sum(axis=other)

    def to_csv(self, path: str | Path) -> None:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        cols = [g.ravel() for g in mesh] + [self.masses.ravel()]
        header = ",".join([f"theta{i + 1}" for i in range(len(self.axes))] + ["mass"])
        lines = [header]
        for row in zip(*cols):
            lines.append(",".join(format(v, ".17g") for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def grid_posterior(
    model: LinearModelSpec, lam: float, data: Dataset, axes: list[Array]
) -> GridPosterior:
    """Tabulate the posterior over a tensor-product grid of parameter values.

    Masses are proportional to ``exp(kalman_loglik) * prior`` at each node,
    normalized in the log domain.
    """
    axes = [np.sort(np.asarray(a, dtype=float)) for a in axes]
    mesh = np.meshgrid(*axes, indexing="ij")
    shape = mesh[0].shape
    thetas = np.stack([g.ravel() for g in mesh], axis=1)
    log_post = kalman_loglik_batch(model, thetas, lam, data)
    log_post += np.array([model.log_prior(th) for th in thetas])
    if not np.any(np.isfinite(log_post)):
        raise EmptySupportError("all grid nodes have zero posterior mass")
    log_norm = logsumexp(log_post)
    log_masses = (log_post - log_norm).reshape(shape)
    return GridPosterior(axes=axes, log_masses=log_masses, masses=np.exp(log_masses))
