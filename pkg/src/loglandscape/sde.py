"""Continuous-time integrators (Ito, Euler-Maruyama) and tau(t) bookkeeping.

Three processes are provided on top of :func:`euler_maruyama`:

* :func:`gld`: ``d theta = -grad L dt + sqrt(2 D) dW``
* :func:`sgd_sde`: ``d theta = -grad L dt + sqrt(2 eta L(theta) / B) H*^{1/2} dW``
* :func:`log_landscape_langevin`: ``d theta = -grad log L d tau + sqrt(2 eta h* / B) dW``,
  which lives on the rescaled clock ``tau = int L dt``.

Analytic potentials take a compiled path (:func:`potential_path`) that uses the
same chunked Gaussian draws as the generic loop, so both routes see identical
noise for identical streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .errors import DivergedError, InputError, PositivityError
from .models import AnalyticPotential, LossModel
from .numerics import RngStream, psd_sqrt
from .sgd import Trajectory

LOSS_FLOOR = 1e-300
_CHUNK = 1 << 15


@dataclass
class SdeConfig:
    dt: float
    steps: int
    theta0: np.ndarray
    rng: RngStream
    record_every: int = 1

    def __post_init__(self):
        self.theta0 = np.array(self.theta0, dtype=float).reshape(-1)
        if not self.dt > 0:
            raise InputError("dt must be positive")
        if self.steps < 1 or self.record_every < 1:
            raise InputError("steps and record_every must be >= 1")
        if not np.all(np.isfinite(self.theta0)):
            raise InputError("theta0 must be finite")


@dataclass(frozen=True)
class TimeChange:
    """Paired grids of physical time ``t`` and rescaled time ``tau``."""

    t: np.ndarray
    tau: np.ndarray


def euler_maruyama(drift_fn: Callable, diffusion_fn: Callable | None, config: SdeConfig,
                   loss_fn: Callable | None = None, time_unit: str = "t",
                   noise_dim: int | None = None) -> Trajectory:
    """Ito Euler-Maruyama: ``theta += drift(theta) dt + S(theta) sqrt(dt) z``.

    ``diffusion_fn`` returns the factor ``S`` (matrix of shape (P, m), or a
    scalar multiplying the identity); ``None`` means no noise.  Snapshots are
    taken at step 0 and every ``record_every`` steps; ``loss_fn`` (if given)
    is recorded alongside.  Non-finite states raise :class:`DivergedError`
    carrying the partial trajectory.
    """
    theta = config.theta0.copy()
    p = theta.shape[0]
    m = p if noise_dim is None else noise_dim
    sq = np.sqrt(config.dt)
    steps, params, losses = [0], [theta.copy()], []
    if loss_fn is not None:
        losses.append(loss_fn(theta))

    def partial():
        return _trajectory(steps, params, losses, config.dt, time_unit, diverged=True)

    j = 0
    while j < config.steps:
        count = min(_CHUNK, config.steps - j)
        z = config.rng.normal((count, m)) if diffusion_fn is not None else None
        for i in range(count):
            step = drift_fn(theta) * config.dt
            if z is not None:
                s = diffusion_fn(theta)
                step = step + (s * z[i] if np.ndim(s) == 0 else s @ z[i]) * sq
            theta = theta + step
            j += 1
            if not np.all(np.isfinite(theta)):
                raise DivergedError(f"non-finite state at step {j}", partial())
            if j % config.record_every == 0:
                steps.append(j)
                params.append(theta.copy())
                if loss_fn is not None:
                    losses.append(loss_fn(theta))
    return _trajectory(steps, params, losses, config.dt, time_unit)


def _trajectory(steps, params, losses, dt, time_unit, diverged=False):
    steps = np.asarray(steps, dtype=np.int64)
    return Trajectory(steps=steps, times=steps * dt,
                      losses=np.asarray(losses, dtype=float) if len(losses) else None,
                      params=np.asarray(params), time_unit=time_unit, diverged=diverged,
                      meta={"dt": dt})


def potential_path(potential: AnalyticPotential, *, drift_power: float, noise_power: float,
                   factor, dt: float, steps: int, theta0, rng: RngStream, record_every: int = 0,
                   max_records: int | None = None, stop_axis: int = -1,
                   stop_below: float = -np.inf, stop_level: float = np.inf) -> dict:
    """Compiled Euler-Maruyama on an analytic potential (see ``_kernels.potential_em``).

    Returns a dict with ``status`` ("done", "hit", "diverged", "nonpositive"),
    ``steps`` taken, ``theta`` (final state), ``records`` (snapshots every
    ``record_every`` steps, excluding step 0), ``t_elapsed`` = sum dt / L and
    ``tau_elapsed`` = sum L dt.
    """
    theta = np.array(theta0, dtype=float).reshape(-1)
    d = theta.shape[0]
    factor = np.asarray(factor, dtype=float)
    if factor.ndim == 0:
        factor = factor * np.eye(d)
    if max_records is None:
        max_records = steps // record_every if record_every > 0 else 0
    out = np.empty((max_records, d))
    rows = 0
    clock = np.zeros(2)
    taken = 0
    status = _kernels.RUNNING
    while taken < steps:
        count = min(_CHUNK, steps - taken)
        z = rng.normal((count, d))
        status, k, r = _kernels.potential_em(
            theta, potential.a, potential.w, potential.k, potential.offset, dt,
            float(drift_power), float(noise_power), factor, z, int(record_every), taken,
            out[rows:], int(stop_axis), float(stop_below), float(stop_level), clock)
        taken += k
        rows += r
        if status != _kernels.RUNNING:
            break
    names = {_kernels.RUNNING: "done", _kernels.HIT: "hit", _kernels.DIVERGED: "diverged",
             _kernels.NONPOSITIVE: "nonpositive"}
    return {"status": names[status], "steps": taken, "theta": theta, "records": out[:rows],
            "t_elapsed": clock[0], "tau_elapsed": clock[1]}


def _potential_trajectory(potential, config, drift_power, noise_power, factor, time_unit):
    res = potential_path(potential, drift_power=drift_power, noise_power=noise_power,
                         factor=factor, dt=config.dt, steps=config.steps, theta0=config.theta0,
                         rng=config.rng, record_every=config.record_every)
    params = np.vstack([config.theta0[None, :], res["records"]])
    steps = np.arange(len(params)) * config.record_every
    traj = _trajectory(steps, params, potential.loss(params), config.dt, time_unit,
                       diverged=res["status"] == "diverged")
    if res["status"] == "diverged":
        raise DivergedError("non-finite state", traj)
    if res["status"] == "nonpositive":
        raise PositivityError(f"loss fell below {LOSS_FLOOR:g}")
    return traj


def gld(model: LossModel, diffusion: float, config: SdeConfig) -> Trajectory:
    """Gradient Langevin dynamics with isotropic diffusion coefficient ``D``."""
    if diffusion < 0:
        raise InputError("diffusion coefficient must be nonnegative")
    amp = np.sqrt(2.0 * diffusion)
    if isinstance(model, AnalyticPotential):
        return _potential_trajectory(model, config, 0.0, 0.0, amp, "t")
    return euler_maruyama(lambda th: -model.full_grad(th), (lambda th: amp) if diffusion > 0 else None,
                          config, loss_fn=model.full_loss)


def sgd_sde(model: LossModel, eta: float, batch_size: int, hessian_ref, config: SdeConfig) -> Trajectory:
    """SDE with the loss-proportional covariance ``Sigma = 2 L(theta) H* / B``.

    The diffusion factor is ``sqrt(2 eta L(theta) / B) * H*^{1/2}``; only the
    scalar ``L(theta)`` changes from step to step.
    """
    root = psd_sqrt(hessian_ref)
    scale = np.sqrt(2.0 * eta / batch_size)
    if isinstance(model, AnalyticPotential):
        return _potential_trajectory(model, config, 0.0, 0.5, scale * root, "t")

    def diffusion(th):
        loss = model.full_loss(th)
        if loss < 0:
            raise InputError(f"negative loss {loss} in loss-proportional diffusion")
        return np.sqrt(loss) * scale * root

    return euler_maruyama(lambda th: -model.full_grad(th), diffusion, config, loss_fn=model.full_loss)


def log_landscape_langevin(model: LossModel, eta: float, batch_size: int, h_star: float,
                           config: SdeConfig, noise: bool = True, hessian_ref=None) -> Trajectory:
    """Langevin dynamics on ``U = log L`` in the rescaled time ``tau``.

    Drift ``-grad L / L``; isotropic diffusion ``sqrt(2 eta h* / B)`` or, with
    ``hessian_ref``, the anisotropic ``sqrt(2 eta H* / B)``.  ``noise=False``
    gives plain gradient flow on ``log L``.  The step variable is tau.
    """
    if h_star <= 0:
        raise InputError("h_star must be positive")
    if hessian_ref is None:
        factor = np.sqrt(2.0 * eta * h_star / batch_size)
    else:
        factor = np.sqrt(2.0 * eta / batch_size) * psd_sqrt(hessian_ref)
    if not noise:
        factor = 0.0 * np.asarray(factor)
    if isinstance(model, AnalyticPotential):
        return _potential_trajectory(model, config, 1.0, 0.0, factor, "tau")

    def drift(th):
        loss = model.full_loss(th)
        if loss < LOSS_FLOOR:
            raise PositivityError(f"loss {loss:.3e} below floor {LOSS_FLOOR:g}")
        return -model.full_grad(th) / loss

    return euler_maruyama(drift, (lambda th: factor) if noise else None, config,
                          loss_fn=model.full_loss, time_unit="tau")


def tau_of_t(trajectory: Trajectory) -> TimeChange:
    """Left-endpoint accumulation ``tau_{j+1} = tau_j + L(theta_j) dt``.

    Needs the loss at every step (``record_every = 1``).
    """
    losses, times = trajectory.losses, trajectory.times
    if losses is None or len(losses) != len(times):
        raise InputError("tau_of_t needs the loss recorded at every step")
    if len(times) > 1 and np.any(np.diff(trajectory.steps) != 1):
        raise InputError("tau_of_t needs the loss recorded at every step")
    dt = np.diff(times)
    tau = np.concatenate([[0.0], np.cumsum(losses[:-1] * dt)])
    return TimeChange(t=np.asarray(times, dtype=float), tau=tau)


def t_of_tau(trajectory: Trajectory) -> TimeChange:
    """Inverse bookkeeping for a tau-process: ``t_{j+1} = t_j + d tau / L(theta_j)``."""
    losses, taus = trajectory.losses, trajectory.times
    if losses is None or len(losses) != len(taus):
        raise InputError("t_of_tau needs the loss recorded at every step")
    if np.any(losses <= 0):
        raise PositivityError("t_of_tau needs L > 0 along the path")
    t = np.concatenate([[0.0], np.cumsum(np.diff(taus) / losses[:-1])])
    return TimeChange(t=t, tau=np.asarray(taus, dtype=float))


def tau_approx(t, loss_min: float):
    """The near-minimum approximation ``tau ~ L(theta*) t`` used for escape-time conversion."""
    return loss_min * np.asarray(t, dtype=float)


def thin(samples, burn_in: float = 0.2, every: int = 10) -> np.ndarray:
    """Drop the leading ``burn_in`` fraction, then keep every ``every``-th sample."""
    s = np.asarray(samples)
    start = int(np.ceil(burn_in * len(s)))
    return s[start::every]
