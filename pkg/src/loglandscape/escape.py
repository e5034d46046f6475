"""Power-law stationary exponents, escape-rate formulas and first-passage experiments."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Callable

import numpy as np

from . import _kernels
from .errors import (DimensionError, DivergedError, EscapeNotObservedError, FitError,
                     InputError, UnsupportedError)
from .models import AnalyticPotential, LinearRegression, LossModel
from .numerics import RngStream, histogram, loglog_fit, psd_sqrt
from .parallel import parallel_map
from .sde import potential_path
from .sgd import SgdConfig, sample_minibatches, sgd_step

MIN_FIT_SAMPLES = 10_000
MIN_PASSAGES = 30
_FPT_CHUNK = 1 << 16


class UnstableMinimumWarning(UserWarning):
    """Effective dimension at or beyond the stability bound."""


def _positive(**values):
    for name, v in values.items():
        if not v > 0:
            raise InputError(f"{name} must be positive, got {v}")


def theory_phi(batch_size: float, eta: float, h_star: float) -> float:
    """Stationary exponent ``1 + B / (eta h*)``."""
    _positive(batch_size=batch_size, eta=eta, h_star=h_star)
    return 1.0 + batch_size / (eta * h_star)


def stability_max_dim(batch_size: float, eta: float, h_star: float) -> float:
    """Strict upper bound ``2 (B / (eta h*) + 1)`` on the effective dimension of a stable minimum."""
    _positive(batch_size=batch_size, eta=eta, h_star=h_star)
    return 2.0 * (batch_size / (eta * h_star) + 1.0)


@dataclass(frozen=True)
class EscapeGeometry:
    loss_min: float
    loss_saddle: float
    h_star: float
    h_e_saddle: float
    n: int = 1
    det_ratio: float = 1.0

    def __post_init__(self):
        if not self.loss_saddle > self.loss_min > 0:
            raise InputError("need L(saddle) > L(minimum) > 0")
        if not self.h_star > 0:
            raise InputError("h_star must be positive")
        if not self.h_e_saddle < 0:
            raise InputError("escape-direction saddle curvature must be negative")
        if self.n < 1:
            raise InputError("effective dimension must be >= 1")
        if not self.det_ratio > 0:
            raise InputError("det_ratio must be positive")

    @property
    def ratio(self) -> float:
        return self.loss_saddle / self.loss_min

    @classmethod
    def from_potential(cls, potential: AnalyticPotential, n: int | None = None,
                       h_star: float | None = None) -> "EscapeGeometry":
        """Geometry from the catalogued minimum and saddle.

        ``h_star`` defaults to the minimum's curvature along the escape axis;
        ``n`` defaults to the full dimension, and the determinant ratio uses
        the Hessians restricted to the escape axis plus the first ``n - 1``
        other coordinates.
        """
        lo, sad = potential.minimum(), potential.saddle()
        e = potential.escape_axis
        dim = potential.param_dim
        n = dim if n is None else n
        if not 1 <= n <= dim:
            raise InputError(f"n must lie in [1, {dim}]")
        axes = [e] + [i for i in range(dim) if i != e][: n - 1]
        h_min = np.diag(lo.hessian)[axes]
        h_sad = np.diag(sad.hessian)[axes]
        return cls(loss_min=lo.loss, loss_saddle=sad.loss,
                   h_star=float(lo.hessian[e, e]) if h_star is None else h_star,
                   h_e_saddle=float(sad.hessian[e, e]), n=n,
                   det_ratio=float(np.prod(h_min) / abs(np.prod(h_sad))))


def kramers_rate_1d(geom: EscapeGeometry, batch_size: float, eta: float) -> float:
    """Single-variable rate ``sqrt(h* |h_s|) / (2 pi) * c^-(1/2 + B/(eta h*))`` per unit t."""
    _positive(batch_size=batch_size, eta=eta)
    expo = 0.5 + batch_size / (eta * geom.h_star)
    return math.sqrt(geom.h_star * abs(geom.h_e_saddle)) / (2 * math.pi) * geom.ratio ** (-expo)


def langer_rate_multi(geom: EscapeGeometry, batch_size: float, eta: float) -> float:
    """Multi-variable rate ``|h_e^s| / (2 pi) sqrt(det ratio) c^-(B/(eta h*) + 1 - n/2)``.

    Warns with :class:`UnstableMinimumWarning` when ``n`` reaches the
    stability bound; the value is still returned.
    """
    _positive(batch_size=batch_size, eta=eta)
    if geom.n >= stability_max_dim(batch_size, eta, geom.h_star):
        warnings.warn(f"effective dimension {geom.n} violates the stability bound "
                      f"{stability_max_dim(batch_size, eta, geom.h_star):g}",
                      UnstableMinimumWarning, stacklevel=2)
    expo = batch_size / (eta * geom.h_star) + 1.0 - geom.n / 2.0
    return abs(geom.h_e_saddle) / (2 * math.pi) * math.sqrt(geom.det_ratio) * geom.ratio ** (-expo)


def classical_kramers_rate(h_star: float, h_saddle: float, barrier: float, diffusion: float) -> float:
    """Additive-noise Kramers rate ``sqrt(h* |h_s|) / (2 pi) exp(-barrier / D)``."""
    _positive(h_star=h_star, diffusion=diffusion)
    return math.sqrt(h_star * abs(h_saddle)) / (2 * math.pi) * math.exp(-barrier / diffusion)


# ---------------------------------------------------------------- exponent fit

@dataclass
class PowerLawFit:
    phi_hat: float
    ci: tuple[float, float]
    stderr: float
    bins_used: int
    intercept: float
    r2: float
    bin_edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    losses: np.ndarray = field(repr=False)

    def to_json(self, path, config: dict | None = None) -> None:
        doc = {"phi_hat": self.phi_hat, "ci": list(self.ci), "bins_used": self.bins_used,
               "config": config or {}}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def loss_function(model) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised ``L`` on an (m, P) array of points for the models used in fits."""
    if isinstance(model, AnalyticPotential):
        return lambda pts: np.asarray(model.loss(pts), dtype=float)
    if isinstance(model, LinearRegression):
        return model.losses_at
    if isinstance(model, LossModel):
        return lambda pts: np.array([model.full_loss(p) for p in pts])
    if callable(model):
        return lambda pts: np.asarray(model(pts[:, 0] if pts.shape[1] == 1 else pts), dtype=float)
    raise InputError("model must be a LossModel or a callable")


_BIN_NODES = 5
_REFITS = 12


def fit_power_law(samples, model, bin_count: int = 64, quantile: float = 0.99,
                  min_count: int = 5, confidence: float = 0.95,
                  min_samples: int = MIN_FIT_SAMPLES) -> PowerLawFit:
    """Fit ``P(theta) ~ L(theta)^-phi`` to one-dimensional samples.

    Bins span the central ``quantile`` range in ``bin_count`` equal widths;
    bins with fewer than ``min_count`` samples are dropped.  The regression of
    counts are fitted by Poisson maximum likelihood with log-density linear in
    ``log L(center)``; the interval uses the larger of the Poisson and the
    Pearson-scaled slope variance.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim == 2:
        if s.shape[1] != 1:
            raise DimensionError("fit_power_law needs one-dimensional samples")
        s = s[:, 0]
    if len(s) < min_samples:
        raise InputError(f"need at least {min_samples} samples, got {len(s)}")
    tail = 0.5 * (1.0 - quantile)
    lo, hi = np.quantile(s, [tail, 1.0 - tail])
    if not hi > lo:
        raise FitError("samples have no spread")
    hist = histogram(s, np.linspace(lo, hi, bin_count + 1))
    keep = hist.counts >= min_count
    if keep.sum() < 2:
        raise FitError(f"only {int(keep.sum())} bins with >= {min_count} counts")
    centers = hist.centers[keep]
    counts = hist.counts[keep].astype(float)
    dens = counts / hist.widths[keep]
    loss_fn = loss_function(model)
    losses = loss_fn(centers[:, None])
    lx = np.log(losses)
    nodes, gw = np.polynomial.legendre.leggauss(_BIN_NODES)
    half = 0.5 * hist.widths[keep]
    inner = loss_fn((centers[:, None] + half[:, None] * nodes[None, :]).reshape(-1, 1))
    rel = np.log(inner).reshape(len(centers), _BIN_NODES) - lx[:, None]
    # Poisson likelihood fit by iteratively reweighted least squares: a log
    # count is biased low in sparse bins, so each pass regresses the working
    # response on log L with the fitted counts as weights.  L^-phi is also
    # curved across a bin, so a bin is compared with its averaged density.
    width = hist.widths[keep]
    mu, corr = counts, np.zeros_like(lx)
    for _ in range(_REFITS):
        work = np.log(mu / width) - corr + (counts - mu) / mu
        slope, intercept, r2 = loglog_fit(losses, np.exp(work), mu)
        corr = np.log(0.5 * np.exp(slope * rel) @ gw)
        mu = np.exp(intercept + slope * lx + corr) * width
    mx = np.sum(mu * lx) / mu.sum()
    sxx = np.sum(mu * (lx - mx) ** 2)
    m = len(counts)
    chi2 = np.sum((counts - mu) ** 2 / mu)
    scale = max(1.0, chi2 / (m - 2)) if m > 2 else 1.0
    se = math.sqrt(scale / sxx)
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    phi = -slope
    return PowerLawFit(phi_hat=phi, ci=(phi - z * se, phi + z * se), stderr=se, bins_used=m,
                       intercept=intercept, r2=r2, bin_edges=hist.bin_edges, counts=hist.counts,
                       losses=losses)


# ---------------------------------------------------------------- first passage

@dataclass
class SdeEscapeConfig:
    """Continuous-time escape runs.

    ``process`` is "gld" (needs ``diffusion``), "sgd_sde" (needs ``eta``,
    ``batch_size``, ``hessian_ref``) or "log_landscape" (needs ``eta``,
    ``batch_size`` and ``h_star`` or ``hessian_ref``).  ``steps`` caps each
    run.  For "log_landscape" the step variable is tau and passage times are
    converted with ``t = tau / L(theta*)``.
    """

    process: str
    dt: float
    steps: int
    rng: RngStream
    eta: float = 0.0
    batch_size: int = 1
    diffusion: float = 0.0
    hessian_ref: np.ndarray | None = None
    h_star: float | None = None

    def __post_init__(self):
        if self.process not in ("gld", "sgd_sde", "log_landscape"):
            raise InputError(f"unknown process {self.process!r}")
        if not self.dt > 0 or self.steps < 1:
            raise InputError("dt must be positive and steps >= 1")

    def powers_and_factor(self, dim: int):
        if self.process == "gld":
            if self.diffusion < 0:
                raise InputError("diffusion must be nonnegative")
            return 0.0, 0.0, math.sqrt(2.0 * self.diffusion) * np.eye(dim)
        _positive(eta=self.eta, batch_size=self.batch_size)
        scale = math.sqrt(2.0 * self.eta / self.batch_size)
        if self.process == "sgd_sde":
            if self.hessian_ref is None:
                raise InputError("sgd_sde needs hessian_ref")
            return 0.0, 0.5, scale * psd_sqrt(self.hessian_ref)
        if self.hessian_ref is not None:
            return 1.0, 0.0, scale * psd_sqrt(self.hessian_ref)
        if self.h_star is None:
            raise InputError("log_landscape needs h_star or hessian_ref")
        _positive(h_star=self.h_star)
        return 1.0, 0.0, scale * math.sqrt(self.h_star) * np.eye(dim)


@dataclass
class FptResult:
    """Per-run first-passage times; censored runs carry the cap time."""

    threshold_ratio: float
    times: np.ndarray
    censored: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.censored = np.asarray(self.censored, dtype=bool)
        if not self.threshold_ratio > 1:
            raise InputError("threshold ratio c must exceed 1")
        if np.any(self.times[~self.censored] <= 0):
            raise InputError("passage times must be positive")

    @property
    def runs(self) -> int:
        return len(self.times)

    @property
    def passage_times(self) -> np.ndarray:
        return self.times[~self.censored]

    @property
    def censored_count(self) -> int:
        return int(self.censored.sum())

    @property
    def mean(self) -> float:
        p = self.passage_times
        return float(np.mean(p)) if len(p) else float("nan")

    @property
    def stderr(self) -> float:
        p = self.passage_times
        return float(np.std(p, ddof=1) / math.sqrt(len(p))) if len(p) > 1 else float("nan")

    @property
    def median(self) -> float:
        p = self.passage_times
        return float(np.median(p)) if len(p) else float("nan")

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run_id", "c", "t_p", "censored"])
            for i, (t, cen) in enumerate(zip(self.times, self.censored)):
                w.writerow([i, repr(float(self.threshold_ratio)), repr(float(t)), int(cen)])

    def summary(self) -> dict:
        return {"c": self.threshold_ratio, "runs": self.runs, "censored": self.censored_count,
                "mean_t_p": self.mean, "stderr": self.stderr, "median_t_p": self.median}


def _loss_min(model, theta_start) -> float:
    if isinstance(model, LinearRegression):
        return model.minimum()[1]
    if isinstance(model, AnalyticPotential):
        return model.minimum().loss
    raise UnsupportedError("L(theta*) is only known for linear regression and analytic potentials; "
                           "pass loss_min explicitly")


def _sgd_run_linreg(model: LinearRegression, config: SgdConfig, theta, level, rng):
    center, _ = model.minimum()
    hess = model.hessian()
    dev_level = 2.0 * (level - model.minimum()[1])
    k = 0
    while k < config.steps:
        count = min(_FPT_CHUNK, config.steps - k)
        batches = sample_minibatches(model.n_samples, config.batch_size, count, rng)
        status, taken = _kernels.linreg_sgd_until(theta, model.x, model.y, config.eta,
                                                  batches, hess, center, dev_level)
        k += taken
        if status == _kernels.HIT:
            return k, False
        if status == _kernels.DIVERGED:
            raise DivergedError(f"SGD diverged after {k} steps")
    return config.steps, True


def _sgd_run_generic(model: LossModel, config: SgdConfig, theta, level, rng):
    k = 0
    while k < config.steps:
        count = min(_FPT_CHUNK, config.steps - k)
        for batch in sample_minibatches(model.n_samples, config.batch_size, count, rng):
            theta = sgd_step(theta, model, batch, config.eta)
            k += 1
            if model.full_loss(theta) >= level:
                return k, False
    return config.steps, True


def _sde_run_quadratic(model: LinearRegression, config: SdeEscapeConfig, theta, level, rng):
    center, loss_min = model.minimum()
    dp, npow, factor = config.powers_and_factor(model.param_dim)
    delta = np.asarray(theta, dtype=float) - center
    clock = np.zeros(2)
    k = 0
    while k < config.steps:
        count = min(_FPT_CHUNK, config.steps - k)
        z = rng.normal((count, model.param_dim))
        status, taken = _kernels.quadratic_em_until(delta, loss_min, model.hessian(), factor,
                                                    config.dt, dp, npow, z, level, clock)
        k += taken
        if status == _kernels.HIT:
            return k, False
        if status == _kernels.DIVERGED:
            raise DivergedError(f"SDE diverged after {k} steps")
        if status == _kernels.NONPOSITIVE:
            raise InputError("loss reached zero in the SDE")
    return config.steps, True


def _sde_run_potential(model: AnalyticPotential, config: SdeEscapeConfig, theta, level, rng,
                       target):
    dp, npow, factor = config.powers_and_factor(model.param_dim)
    if target == "cross":
        e = model.escape_axis
        stop = {"stop_axis": e, "stop_below": -float(model.w[e]), "stop_level": np.inf}
    else:
        stop = {"stop_level": level}
    res = potential_path(model, drift_power=dp, noise_power=npow, factor=factor, dt=config.dt,
                         steps=config.steps, theta0=theta, rng=rng, **stop)
    if res["status"] == "diverged":
        raise DivergedError(f"SDE diverged after {res['steps']} steps")
    if res["status"] == "nonpositive":
        raise InputError("loss reached zero in the SDE")
    return res["steps"], res["status"] != "hit"


def first_passage_times(model: LossModel, config, theta_start, c: float, runs: int,
                        loss_min: float | None = None, target: str = "level",
                        require_passage: bool = True) -> FptResult:
    """Mean-first-passage experiment over ``runs`` independent runs.

    Run ``i`` uses ``config.rng.substream(i)``.  ``config`` is an
    :class:`SgdConfig` (time ``t = eta k``) or an :class:`SdeEscapeConfig`
    (time ``t = dt j``, or ``tau / L(theta*)`` for the log-landscape process);
    ``config.steps`` caps every run and capped runs are censored.

    ``target="level"`` stops when ``L >= c L(theta*)``.  ``target="cross"``
    (analytic double wells) stops when the escape coordinate reaches the
    mirrored minimum; ``c`` is then taken from the catalogue.

    Raises :class:`EscapeNotObservedError` (with ``.result``) when every run
    is censored and ``require_passage`` is set.
    """
    if runs < 1:
        raise InputError("runs must be >= 1")
    if target not in ("level", "cross"):
        raise InputError(f"unknown target {target!r}")
    theta0 = np.asarray(theta_start, dtype=float).reshape(-1)
    if theta0.shape[0] != model.param_dim:
        raise DimensionError(f"theta_start has {theta0.shape[0]} entries, model expects {model.param_dim}")
    if loss_min is None:
        loss_min = _loss_min(model, theta0)
    if target == "cross":
        if not isinstance(model, AnalyticPotential):
            raise UnsupportedError("crossing targets need an analytic double well")
        c = model.saddle().loss / loss_min
    if not c > 1:
        raise InputError("threshold ratio c must exceed 1")
    level = c * loss_min

    if isinstance(config, SgdConfig):
        config.validate(model.n_samples)
        if target == "cross":
            raise UnsupportedError("crossing targets are only supported for SDE runs")
        runner = _sgd_run_linreg if isinstance(model, LinearRegression) else _sgd_run_generic
        scale, unit = config.eta, "t = eta k"

        def run_one(rng):
            return runner(model, config, theta0.copy(), level, rng)
    elif isinstance(config, SdeEscapeConfig):
        if isinstance(model, AnalyticPotential):
            def run_one(rng):
                return _sde_run_potential(model, config, theta0.copy(), level, rng, target)
        elif isinstance(model, LinearRegression):
            def run_one(rng):
                return _sde_run_quadratic(model, config, theta0.copy(), level, rng)
        else:
            raise UnsupportedError("SDE first passage needs linear regression or an analytic potential")
        if config.process == "log_landscape":
            # tau ~ L(theta*) t near the minimum
            scale, unit = config.dt / loss_min, "t = tau / L(theta*)"
        else:
            scale, unit = config.dt, "t = dt j"
    else:
        raise InputError("config must be an SgdConfig or an SdeEscapeConfig")

    outcomes = parallel_map(lambda i: run_one(config.rng.substream(i)), range(runs))
    steps = np.array([o[0] for o in outcomes], dtype=float)
    censored = np.array([o[1] for o in outcomes], dtype=bool)
    result = FptResult(threshold_ratio=c, times=steps * scale, censored=censored,
                       meta={"loss_min": loss_min, "level": level, "target": target,
                             "time": unit, "step_cap": config.steps})
    if require_passage and result.censored_count == runs:
        err = EscapeNotObservedError(f"all {runs} runs censored at c={c:g}")
        err.result = result
        raise err
    return result


@dataclass(frozen=True)
class EscapeRate:
    rate: float
    stderr: float
    passages: int


def empirical_escape_rate(fpt: FptResult, min_passages: int = MIN_PASSAGES) -> EscapeRate:
    """``1 / mean(t_p)`` with a delta-method standard error, assuming exponential escape."""
    p = fpt.passage_times
    if len(p) < min_passages:
        raise InputError(f"need at least {min_passages} uncensored passages, got {len(p)}")
    mean = float(np.mean(p))
    se_mean = float(np.std(p, ddof=1) / math.sqrt(len(p)))
    return EscapeRate(rate=1.0 / mean, stderr=se_mean / mean ** 2, passages=len(p))


def passage_slope(results) -> tuple[float, float, float]:
    """Log-log slope of mean passage time against the threshold ratio."""
    cs = [r.threshold_ratio for r in results]
    means = [r.mean for r in results]
    if any(not np.isfinite(m) for m in means):
        raise FitError("some thresholds have no uncensored passages")
    return loglog_fit(cs, means)
