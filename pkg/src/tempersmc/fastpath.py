"""Compiled population-filter kernels for the built-in models.

These run the same algorithm as the vectorized numpy population filter —
one bootstrap filter per parameter vector, multinomial resampling at every
step, full randomness recording — but with the time/particle loops compiled
via numba.  All randomness is pre-drawn from the caller's generator, so
results are deterministic given the RNG stream and independent of worker
count.  The kernels are statistically equivalent to, but not bit-identical
with, the pure-numpy path.

Output arrays are time-major ((J, T, N_x, ...)), keeping every inner loop on
contiguous memory.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _resample_row(r_prev, ucol, inv2, wcum, anc):
    """Multinomial ancestor draws for one filter time step.

    Fills ``anc`` with categorical draws proportional to
    ``exp(-r_prev/(2*lam))`` and returns ``(contrib, bad)`` where ``contrib``
    is the step's log-sum-weight term ``-r_min*inv2 + log(sum w)`` (before
    the additive constant) and ``bad`` flags total weight underflow, in which
    case resampling falls back to uniform.
    """
    n = r_prev.shape[0]
    r_min = np.inf
    for i in range(n):
        if r_prev[i] < r_min:
            r_min = r_prev[i]
    bad = not np.isfinite(r_min)
    tot = 0.0
    if bad:
        for i in range(n):
            tot += 1.0
            wcum[i] = tot
        contrib = -np.inf
    else:
        for i in range(n):
            tot += math.exp((r_min - r_prev[i]) * inv2)
            wcum[i] = tot
        contrib = -r_min * inv2 + math.log(tot)
    for i in range(n):
        target = ucol[i] * tot
        lo = 0
        hi = n
        while lo < hi:
            mid = (lo + hi) // 2
            if wcum[mid] <= target:
                lo = mid + 1
            else:
                hi = mid
        if lo >= n:
            lo = n - 1
        anc[i] = lo
    return contrib, bad


@njit(cache=True)
def _final_term(r_last, inv2):
    """Log-sum-weight term of the last time step (no resampling follows)."""
    n = r_last.shape[0]
    r_min = np.inf
    for i in range(n):
        if r_last[i] < r_min:
            r_min = r_last[i]
    if not np.isfinite(r_min):
        return -np.inf
    tot = 0.0
    for i in range(n):
        tot += math.exp((r_min - r_last[i]) * inv2)
    return -r_min * inv2 + math.log(tot)


@njit(cache=True)
def atan_population_filter(
    thetas, u, y, lam, init, normals, uniforms, states, ancestors, residuals,
    z_acc, degenerate,
):
    """Population bootstrap filter for the scalar arctangent model.

    Shapes: states (J, T, N, 1), ancestors (J, T-1, N), residuals (J, T, N),
    init (J, N, 1), normals (J, T-1, N, 1), uniforms (J, T-1, N).
    """
    J, T, N, _ = states.shape
    inv2 = 1.0 / (2.0 * lam)
    wcum = np.empty(N)
    anc = np.empty(N, np.int64)
    for j in range(J):
        th1 = thetas[j, 0]
        offset = th1 * thetas[j, 1]
        x_w = states[j, :, :, 0]
        r_w = residuals[j]
        zj = 0.0
        badrow = False
        for n in range(N):
            x = init[j, n, 0]
            x_w[0, n] = x
            d = y[0, 0] - (abs(x) + offset)
            r = d * d
            r_w[0, n] = r if np.isfinite(r) else np.inf
        for t in range(1, T):
            contrib, bad = _resample_row(r_w[t - 1], uniforms[j, t - 1], inv2, wcum, anc)
            if bad:
                badrow = True
                zj = -np.inf
            elif zj > -np.inf:
                zj += contrib
            u0 = u[t - 1, 0]
            for n in range(N):
                a = anc[n]
                ancestors[j, t - 1, n] = a
                x = math.atan(x_w[t - 1, a]) + th1 * u0 + normals[j, t - 1, n, 0]
                x_w[t, n] = x
                d = y[t, 0] - (abs(x) + offset)
                r = d * d
                r_w[t, n] = r if np.isfinite(r) else np.inf
        final = _final_term(r_w[T - 1], inv2)
        if final == -np.inf:
            badrow = True
            zj = -np.inf
        elif zj > -np.inf:
            zj += final
        z_acc[j] = zj
        degenerate[j] = badrow


@njit(cache=True)
def linear_population_filter(
    thetas, u, y, lam, init, normals, uniforms, states, ancestors, residuals,
    z_acc, degenerate,
):
    """Population bootstrap filter for the two-state linear model.

    Shapes: states (J, T, N, 2), ancestors (J, T-1, N), residuals (J, T, N),
    init (J, N, 2), normals (J, T-1, N, 2), uniforms (J, T-1, N).
    """
    J, T, N, _ = states.shape
    inv2 = 1.0 / (2.0 * lam)
    wcum = np.empty(N)
    anc = np.empty(N, np.int64)
    for j in range(J):
        th1 = thetas[j, 0]
        th2 = thetas[j, 1]
        x_w = states[j]
        r_w = residuals[j]
        zj = 0.0
        badrow = False
        for n in range(N):
            x0 = init[j, n, 0]
            x1 = init[j, n, 1]
            x_w[0, n, 0] = x0
            x_w[0, n, 1] = x1
            d = y[0, 0] - x0
            r = d * d
            r_w[0, n] = r if np.isfinite(r) else np.inf
        for t in range(1, T):
            contrib, bad = _resample_row(r_w[t - 1], uniforms[j, t - 1], inv2, wcum, anc)
            if bad:
                badrow = True
                zj = -np.inf
            elif zj > -np.inf:
                zj += contrib
            u0 = u[t - 1, 0]
            for n in range(N):
                a = anc[n]
                ancestors[j, t - 1, n] = a
                x0 = x_w[t - 1, a, 0] + th1 * x_w[t - 1, a, 1] + th2 * u0 + normals[j, t - 1, n, 0]
                x1 = 0.1 * x_w[t - 1, a, 1] + normals[j, t - 1, n, 1]
                x_w[t, n, 0] = x0
                x_w[t, n, 1] = x1
                d = y[t, 0] - x0
                r = d * d
                r_w[t, n] = r if np.isfinite(r) else np.inf
        final = _final_term(r_w[T - 1], inv2)
        if final == -np.inf:
            badrow = True
            zj = -np.inf
        elif zj > -np.inf:
            zj += final
        z_acc[j] = zj
        degenerate[j] = badrow


KERNELS = {
    "atan": atan_population_filter,
    "linear": linear_population_filter,
}
