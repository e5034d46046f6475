"""Discrete SGD engine with noise extraction and noise-strength telemetry.

Time is measured as ``t = eta * k``.  Mini-batches are drawn independently at
every step, uniformly among the size-B subsets (no epoch shuffling).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DivergedError, InputError
from .models import LinearRegression, LossModel, MLP
from .numerics import RngStream

DIVERGENCE_LOSS = 1e12
MAX_STORED_PARAMS = 10_000
_CHUNK = 1 << 16


def _check_batch_size(n: int, b: int) -> None:
    if not 1 <= b <= n:
        raise InputError(f"batch size B={b} must satisfy 1 <= B <= N={n}")


def sample_minibatches(n: int, b: int, count: int, rng: RngStream) -> np.ndarray:
    """``count`` independent uniform size-``b`` subsets of ``range(n)``, shape (count, b)."""
    _check_batch_size(n, b)
    if b == 1:
        return rng.integers(n, size=(count, 1))
    if b == n:
        return np.tile(np.arange(n), (count, 1))
    # probability that b draws with replacement are all distinct
    accept = np.exp(np.sum(np.log1p(-np.arange(b) / n)))
    if accept > 0.5:
        # rejection keeps ordered distinct tuples uniform, hence subsets uniform
        idx = rng.integers(n, size=(count, b))
        while True:
            s = np.sort(idx, axis=1)
            bad = np.any(s[:, 1:] == s[:, :-1], axis=1)
            n_bad = int(bad.sum())
            if n_bad == 0:
                return idx
            idx[bad] = rng.integers(n, size=(n_bad, b))
    keys = rng.uniform((count, n))
    return np.argpartition(keys, b - 1, axis=1)[:, :b]


def sample_minibatch(n: int, b: int, rng: RngStream) -> np.ndarray:
    return sample_minibatches(n, b, 1, rng)[0]


def sgd_step(theta, model: LossModel, batch, eta: float) -> np.ndarray:
    g = model.batch_grad(theta, batch)
    if not np.all(np.isfinite(g)):
        raise DivergedError("non-finite mini-batch gradient")
    return np.asarray(theta, dtype=float) - eta * g


def sgd_noise_sample(theta, model: LossModel, batch) -> np.ndarray:
    """SGD noise ``xi = -(grad L_batch - grad L)``."""
    return -(model.batch_grad(theta, batch) - model.full_grad(theta))


def noise_strength(theta, model: LossModel) -> float:
    """``mean_mu |grad l_mu|^2 - |grad L|^2``, the trace of the per-sample gradient covariance."""
    if isinstance(model, MLP):
        mean_sq, g = model.noise_terms(theta)
        return max(mean_sq - float(g @ g), 0.0)
    grads = model.per_sample_grads(theta)
    mean = grads.mean(axis=0)
    centered = grads - mean
    return float(np.einsum("ij,ij->", centered, centered) / len(grads))


@dataclass
class SgdConfig:
    eta: float
    batch_size: int
    steps: int
    rng: RngStream
    record_every: int = 1
    record_noise: bool = False

    def validate(self, n_samples: int) -> None:
        if not self.eta >= 0:
            raise InputError("learning rate must be nonnegative")
        _check_batch_size(n_samples, self.batch_size)
        if self.steps < 1 or self.record_every < 1:
            raise InputError("steps and record_every must be >= 1")


@dataclass
class Trajectory:
    """Recorded snapshots of a discrete or continuous run.

    ``steps`` are iteration indices; ``times`` the matching physical time
    (``eta * k`` for SGD, ``dt * j`` for SDEs, measured in ``time_unit``).
    ``params`` is ``None`` when the parameter vector is too large to keep.
    """

    steps: np.ndarray
    times: np.ndarray
    losses: np.ndarray
    params: np.ndarray | None = None
    noise_strengths: np.ndarray | None = None
    time_unit: str = "t"
    diverged: bool = False
    meta: dict = field(default_factory=dict)
    last_params: np.ndarray | None = None

    def __len__(self):
        return len(self.steps)

    @property
    def final_params(self):
        """Parameters at the last step taken (kept even when snapshots are not)."""
        if self.last_params is not None:
            return self.last_params
        return None if self.params is None else self.params[-1]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", self.time_unit, "loss", "noise_strength"])
            ns = self.noise_strengths
            for i, k in enumerate(self.steps):
                w.writerow([int(k), repr(float(self.times[i])), repr(float(self.losses[i])),
                            "" if ns is None else repr(float(ns[i]))])

    def params_to_csv(self, path) -> None:
        if self.params is None:
            raise InputError("trajectory holds no parameter snapshots")
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k"] + [f"theta_{i}" for i in range(self.params.shape[1])])
            for k, p in zip(self.steps, self.params):
                w.writerow([int(k)] + [repr(float(v)) for v in p])


def _finish(model, config, steps, params, losses, noise, diverged, keep_params, last=None):
    steps = np.asarray(steps, dtype=np.int64)
    return Trajectory(
        steps=steps,
        times=config.eta * steps,
        losses=np.asarray(losses, dtype=float),
        params=np.asarray(params) if keep_params else None,
        noise_strengths=None if noise is None else np.asarray(noise, dtype=float),
        diverged=diverged,
        meta={"eta": config.eta, "batch_size": config.batch_size, "seed": config.rng.seed},
        last_params=None if last is None else np.array(last, dtype=float),
    )


def _bad_loss(loss: float) -> bool:
    return not np.isfinite(loss) or abs(loss) > DIVERGENCE_LOSS


def run_sgd(model: LossModel, config: SgdConfig, theta0) -> Trajectory:
    """Run ``config.steps`` SGD iterations from ``theta0``.

    Snapshots (step 0 and every ``record_every`` steps) hold the loss, the
    parameters when ``P <= 10^4`` and, with ``record_noise``, the noise
    strength.  Divergence (non-finite loss or ``|L| > 1e12``) stops the run and
    returns the partial trajectory with ``diverged=True``.
    """
    config.validate(model.n_samples)
    theta = np.array(theta0, dtype=float).reshape(-1)
    keep_params = model.param_dim <= MAX_STORED_PARAMS
    if isinstance(model, LinearRegression) and not config.record_noise:
        return _run_linreg(model, config, theta, keep_params)

    def snapshot(k, th):
        loss = model.full_loss(th)
        steps.append(k)
        losses.append(loss)
        if keep_params:
            params.append(th.copy())
        if noise is not None:
            noise.append(noise_strength(th, model))
        return loss

    steps, losses, params = [], [], []
    noise = [] if config.record_noise else None
    if _bad_loss(snapshot(0, theta)):
        return _finish(model, config, steps, params, losses, noise, True, keep_params, theta)
    k = 0
    while k < config.steps:
        count = min(_CHUNK, config.steps - k)
        batches = sample_minibatches(model.n_samples, config.batch_size, count, config.rng)
        for batch in batches:
            try:
                theta = sgd_step(theta, model, batch, config.eta)
            except DivergedError:
                return _finish(model, config, steps, params, losses, noise, True, keep_params, theta)
            k += 1
            if k % config.record_every == 0 and _bad_loss(snapshot(k, theta)):
                return _finish(model, config, steps, params, losses, noise, True, keep_params, theta)
    return _finish(model, config, steps, params, losses, noise, False, keep_params, theta)


def _run_linreg(model: LinearRegression, config: SgdConfig, theta, keep_params) -> Trajectory:
    """Compiled fast path; same batch stream and update rule as the generic loop."""
    rec = [theta.copy()]
    k = 0
    diverged = False
    while k < config.steps:
        count = min(_CHUNK, config.steps - k)
        batches = sample_minibatches(model.n_samples, config.batch_size, count, config.rng)
        out = np.empty((count // config.record_every + 1, model.param_dim))
        status, rows = _kernels.linreg_sgd(theta, model.x, model.y, config.eta, batches,
                                           config.record_every, k, out)
        rec.extend(out[:rows])
        if status == _kernels.DIVERGED:
            diverged = True
            break
        k += count
    params = np.array(rec)
    steps = np.arange(len(params)) * config.record_every
    losses = model.losses_at(params)
    bad = ~np.isfinite(losses) | (np.abs(losses) > DIVERGENCE_LOSS)
    if bad.any():
        cut = int(np.argmax(bad)) + 1
        params, steps, losses, diverged = params[:cut], steps[:cut], losses[:cut], True
    return _finish(model, config, steps, params, losses, None, diverged, keep_params, theta)
