"""Compiled inner loops for the long Monte Carlo runs.

Random draws are generated outside (numpy ``Generator`` chunks) and passed in,
so every kernel is a pure function of its inputs and results stay tied to the
owning :class:`~loglandscape.numerics.RngStream`.
"""

import numpy as np
from numba import njit

# status codes returned by the kernels
RUNNING = 0
HIT = 1
DIVERGED = 2
NONPOSITIVE = 3


@njit(cache=True, nogil=True)
def linreg_sgd(theta, x, y, eta, batches, record_every, k0, out):
    """Advance SGD on linear regression over ``batches`` (K, B); record into ``out``.

    ``k0`` is the global step index before this chunk; rows of ``out`` receive
    theta whenever the global step is a multiple of ``record_every``.
    Returns (status, rows written).
    """
    n_steps, b = batches.shape
    d = theta.shape[0]
    g = np.empty(d)
    row = 0
    for k in range(n_steps):
        for a in range(d):
            g[a] = 0.0
        for j in range(b):
            i = batches[k, j]
            r = -y[i]
            for a in range(d):
                r += x[i, a] * theta[a]
            for a in range(d):
                g[a] += x[i, a] * r
        for a in range(d):
            theta[a] -= eta * g[a] / b
            if not np.isfinite(theta[a]):
                return DIVERGED, row
        if (k0 + k + 1) % record_every == 0:
            for a in range(d):
                out[row, a] = theta[a]
            row += 1
    return RUNNING, row


@njit(cache=True, nogil=True)
def linreg_sgd_until(theta, x, y, eta, batches, hess, center, level):
    """SGD on linear regression until ``(theta-center)' hess (theta-center) >= level``.

    Returns (status, steps taken in this chunk).
    """
    n_steps, b = batches.shape
    d = theta.shape[0]
    g = np.empty(d)
    for k in range(n_steps):
        for a in range(d):
            g[a] = 0.0
        for j in range(b):
            i = batches[k, j]
            r = -y[i]
            for a in range(d):
                r += x[i, a] * theta[a]
            for a in range(d):
                g[a] += x[i, a] * r
        for a in range(d):
            theta[a] -= eta * g[a] / b
        q = 0.0
        for a in range(d):
            da = theta[a] - center[a]
            for c in range(d):
                q += da * hess[a, c] * (theta[c] - center[c])
        if not np.isfinite(q):
            return DIVERGED, k + 1
        if q >= level:
            return HIT, k + 1
    return RUNNING, n_steps


@njit(cache=True, nogil=True)
def _potential(theta, qa, qw, qk, offset):
    loss = offset
    for i in range(theta.shape[0]):
        t = theta[i]
        u = t * t - qw[i] * qw[i]
        loss += qa[i] * u * u + 0.5 * qk[i] * t * t
    return loss


@njit(cache=True, nogil=True)
def _potential_grad(theta, qa, qw, qk, g):
    for i in range(theta.shape[0]):
        t = theta[i]
        g[i] = 4.0 * qa[i] * t * (t * t - qw[i] * qw[i]) + qk[i] * t


@njit(cache=True, nogil=True)
def potential_em(theta, qa, qw, qk, offset, dt, drift_power, noise_power, factor, noise,
                 record_every, k0, out, stop_axis, stop_below, stop_level, clock):
    """Euler-Maruyama on a separable analytic potential.

    Step: ``theta += -grad L / L**drift_power * dt + L**noise_power * factor @ z * sqrt(dt)``
    with coefficients at the left endpoint.  ``(drift_power, noise_power)`` is
    (0, 0) for gradient Langevin, (0, 0.5) for the loss-proportional SDE and
    (1, 0) for Langevin on log L.

    Stops when ``theta[stop_axis] <= stop_below`` (``stop_axis >= 0``) or when
    ``L >= stop_level``.  ``clock[0]`` accumulates ``sum dt / L`` (elapsed t
    for a tau-process), ``clock[1]`` accumulates ``sum L dt`` (elapsed tau for
    a t-process); both use the left-endpoint rule.
    Returns (status, steps taken, rows written).
    """
    n_steps = noise.shape[0]
    d = theta.shape[0]
    g = np.empty(d)
    sq = np.sqrt(dt)
    row = 0
    for k in range(n_steps):
        loss = _potential(theta, qa, qw, qk, offset)
        if loss <= 1e-300:
            return NONPOSITIVE, k, row
        clock[0] += dt / loss
        clock[1] += dt * loss
        _potential_grad(theta, qa, qw, qk, g)
        dscale = loss ** -drift_power if drift_power != 0.0 else 1.0
        nscale = loss ** noise_power if noise_power != 0.0 else 1.0
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += factor[i, j] * noise[k, j]
            theta[i] += -g[i] * dscale * dt + nscale * s * sq
        for i in range(d):
            if not np.isfinite(theta[i]):
                return DIVERGED, k + 1, row
        if record_every > 0 and (k0 + k + 1) % record_every == 0 and row < out.shape[0]:
            for i in range(d):
                out[row, i] = theta[i]
            row += 1
        if stop_axis >= 0 and theta[stop_axis] <= stop_below:
            return HIT, k + 1, row
        if _potential(theta, qa, qw, qk, offset) >= stop_level:
            return HIT, k + 1, row
    return RUNNING, n_steps, row


@njit(cache=True, nogil=True)
def quadratic_em_until(delta, loss_min, hess, factor, dt, drift_power, noise_power, noise,
                       level, clock):
    """Euler-Maruyama on ``L = loss_min + delta' H delta / 2`` until ``L >= level``.

    Same step rule and power conventions as :func:`potential_em`; ``delta`` is
    the displacement from the minimum.  Returns (status, steps taken).
    """
    n_steps = noise.shape[0]
    d = delta.shape[0]
    g = np.empty(d)
    sq = np.sqrt(dt)
    for k in range(n_steps):
        q = 0.0
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += hess[i, j] * delta[j]
            g[i] = s
            q += delta[i] * s
        loss = loss_min + 0.5 * q
        if loss <= 1e-300:
            return NONPOSITIVE, k
        clock[0] += dt / loss
        clock[1] += dt * loss
        dscale = loss ** -drift_power if drift_power != 0.0 else 1.0
        nscale = loss ** noise_power if noise_power != 0.0 else 1.0
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += factor[i, j] * noise[k, j]
            delta[i] += -g[i] * dscale * dt + nscale * s * sq
        q = 0.0
        for i in range(d):
            for j in range(d):
                q += delta[i] * hess[i, j] * delta[j]
        if not np.isfinite(q):
            return DIVERGED, k + 1
        if loss_min + 0.5 * q >= level:
            return HIT, k + 1
    return RUNNING, n_steps
