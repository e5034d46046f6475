"""Noise covariance, Hessians and spectral diagnostics.

Covariances are P x P and meant for small models.  The decoupling check also
handles networks with P much larger than N by working in sample space: the
nonzero eigenvalues of ``J' W J`` equal those of ``W^1/2 J J' W^1/2``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, UnsupportedError
from .models import LossModel, MLP
from .numerics import RngStream, Spectrum, eigvals_desc, sym_eig
from .sgd import sample_minibatches

FD_MAX_PARAMS = 200
DEFAULT_EPS_REL = 1e-2
DEFAULT_EPS_ABS = 1e-8
DECILE_GROUPS = 10


def covariance_prefactor(batch_size: int, n_samples: int) -> float:
    """``(1/B) (N-B)/(N-1)``; zero when ``B = N``."""
    if not 1 <= batch_size <= n_samples:
        raise InputError(f"batch size B={batch_size} must satisfy 1 <= B <= N={n_samples}")
    if batch_size == n_samples:
        return 0.0
    return (n_samples - batch_size) / (batch_size * (n_samples - 1))


@dataclass
class CovarianceReport:
    sigma_exact: np.ndarray
    batch_size: int
    n_samples: int
    prefactor: float
    sigma_empirical: np.ndarray | None = None

    @property
    def trace(self) -> float:
        return float(np.trace(self.sigma_exact))

    def empirical_error(self) -> float:
        """Relative Frobenius distance of the empirical estimate from the exact matrix."""
        if self.sigma_empirical is None:
            raise InputError("no empirical covariance attached")
        ref = np.linalg.norm(self.sigma_exact)
        return float(np.linalg.norm(self.sigma_empirical - self.sigma_exact) / ref)


def _gradient_second_moment(grads: np.ndarray):
    """Centered second moment ``(1/N) sum g g' - gbar gbar'`` computed from centered rows."""
    mean = grads.mean(axis=0)
    centered = grads - mean
    m = centered.T @ centered / len(grads)
    return 0.5 * (m + m.T)


def sigma_exact(theta, model: LossModel, batch_size: int) -> CovarianceReport:
    """Exact mini-batch noise covariance for sampling without replacement."""
    n = model.n_samples
    pref = covariance_prefactor(batch_size, n)
    grads = model.per_sample_grads(theta)
    sigma = pref * _gradient_second_moment(grads)
    return CovarianceReport(sigma_exact=sigma, batch_size=batch_size, n_samples=n, prefactor=pref)


def sigma_empirical(theta, model: LossModel, batch_size: int, n_draws: int, rng: RngStream) -> np.ndarray:
    """Sample covariance (ddof=1) of the noise over ``n_draws`` random mini-batches."""
    if n_draws < 2:
        raise InputError("n_draws must be at least 2")
    batches = sample_minibatches(model.n_samples, batch_size, n_draws, rng)
    full = model.full_grad(theta)
    grads = model.per_sample_grads(theta)
    xi = -(grads[batches].mean(axis=1) - full)
    xi -= xi.mean(axis=0)
    cov = xi.T @ xi / (n_draws - 1)
    return 0.5 * (cov + cov.T)


def sigma_enumerated(theta, model: LossModel, batch_size: int) -> np.ndarray:
    """Covariance of the noise over every size-B subset, each weighted equally.

    Exponential in N; an oracle for small instances only.
    """
    n = model.n_samples
    if not 1 <= batch_size <= n:
        raise InputError(f"batch size B={batch_size} must satisfy 1 <= B <= N={n}")
    if math.comb(n, batch_size) > 10**6:
        raise UnsupportedError("too many mini-batches to enumerate")
    full = model.full_grad(theta)
    xi = np.array([-(model.batch_grad(theta, list(c)) - full)
                   for c in itertools.combinations(range(n), batch_size)])
    cov = xi.T @ xi / len(xi)
    return 0.5 * (cov + cov.T)


def sigma_small_batch(theta, model: LossModel, batch_size: int) -> np.ndarray:
    """``(1/(B N)) sum grad l grad l'``: the form valid for ``B << N`` with the mean term dropped."""
    grads = model.per_sample_grads(theta)
    m = grads.T @ grads / (batch_size * len(grads))
    return 0.5 * (m + m.T)


def sigma_loss_hessian(theta, model: LossModel, batch_size: int, hessian_ref) -> np.ndarray:
    """``2 L(theta) H / B`` with ``H`` a fixed reference Hessian."""
    return 2.0 * model.full_loss(theta) / batch_size * np.asarray(hessian_ref, dtype=float)


def gauss_newton_hessian(theta, model: LossModel) -> np.ndarray:
    """``(1/N) sum grad f grad f'`` from the model's output gradients."""
    j = model.output_grads(theta)
    h = j.T @ j / len(j)
    return 0.5 * (h + h.T)


def hessian_fd(theta, model: LossModel, step: float | None = None) -> np.ndarray:
    """Symmetrised central differences of ``full_grad``.

    Default step is ``1e-4 (1 + max|theta|)``.  Refuses models with more than
    200 parameters.
    """
    t = np.asarray(theta, dtype=float).reshape(-1)
    p = t.shape[0]
    if p > FD_MAX_PARAMS:
        raise UnsupportedError(f"finite-difference Hessian refused for P={p} > {FD_MAX_PARAMS}")
    if step is None:
        step = 1e-4 * (1.0 + np.max(np.abs(t)))
    h = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = step
        h[:, j] = (model.full_grad(t + e) - model.full_grad(t - e)) / (2.0 * step)
    return 0.5 * (h + h.T)


def decile_means(eigenvalues, groups: int = DECILE_GROUPS) -> np.ndarray:
    """Means of equal-count groups of the descending-sorted values.

    Uses ``min(groups, len(values))`` groups so short spectra still work.
    """
    v = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    if len(v) == 0:
        raise InputError("empty spectrum")
    return np.array([chunk.mean() for chunk in np.array_split(v, min(groups, len(v)))])


def decile_overlap(exact, decoupled, groups: int = DECILE_GROUPS) -> float:
    """Largest relative gap ``|a-b| / max(a, b)`` between group means.

    The bottom group (smallest eigenvalues) is excluded when there is more
    than one group.
    """
    a = decile_means(exact, groups)
    b = decile_means(decoupled, groups)
    if len(a) != len(b):
        raise InputError("spectra must have equal length")
    if len(a) > 1:
        a, b = a[:-1], b[:-1]
    scale = np.maximum(np.abs(a), np.abs(b))
    gaps = np.where(scale > 0, np.abs(a - b) / np.where(scale > 0, scale, 1.0), 0.0)
    return float(gaps.max())


@dataclass
class DecouplingReport:
    """Exact ``(2/N) sum l_mu grad f grad f'`` against ``2 L (1/N) sum grad f grad f'``.

    ``space`` is "parameter" when the matrices are P x P and "sample" when
    they are the N x N duals sharing the same nonzero spectrum.
    """

    exact_matrix: np.ndarray
    decoupled_matrix: np.ndarray
    exact_eigenvalues: np.ndarray
    decoupled_eigenvalues: np.ndarray
    overlap: float
    loss: float
    space: str
    groups: int = DECILE_GROUPS
    decile_exact: np.ndarray = field(default=None)
    decile_decoupled: np.ndarray = field(default=None)


def decoupling_check(theta, model: LossModel, groups: int = DECILE_GROUPS,
                     space: str = "auto") -> DecouplingReport:
    """Compare the residual-weighted and the loss-scaled output-gradient Gram matrices.

    Spectra keep the ``min(P, N)`` leading eigenvalues, the part that can be
    nonzero; the overlap metric is :func:`decile_overlap`.
    """
    n, p = model.n_samples, model.param_dim
    if space == "auto":
        space = "sample" if p > n else "parameter"
    if space not in ("sample", "parameter"):
        raise InputError(f"unknown space {space!r}")
    losses = model.per_sample_losses(theta)
    loss = float(np.mean(losses))
    if space == "sample":
        if isinstance(model, MLP):
            _, k = model.tangent_kernel(theta)
        else:
            j = model.output_grads(theta)
            k = j @ j.T
        root = np.sqrt(2.0 * losses / n)
        exact = root[:, None] * k * root[None, :]
        decoupled = (2.0 * loss / n) * k
    else:
        j = model.output_grads(theta)
        exact = (j * (2.0 * losses / n)[:, None]).T @ j
        decoupled = (2.0 * loss / n) * (j.T @ j)
    exact = 0.5 * (exact + exact.T)
    decoupled = 0.5 * (decoupled + decoupled.T)
    keep = min(p, n)
    ev_exact = eigvals_desc(exact)[:keep]
    ev_dec = eigvals_desc(decoupled)[:keep]
    return DecouplingReport(
        exact_matrix=exact, decoupled_matrix=decoupled,
        exact_eigenvalues=ev_exact, decoupled_eigenvalues=ev_dec,
        overlap=decile_overlap(ev_exact, ev_dec, groups), loss=loss, space=space, groups=groups,
        decile_exact=decile_means(ev_exact, groups), decile_decoupled=decile_means(ev_dec, groups),
    )


@dataclass(frozen=True)
class EffectiveDimension:
    n: int
    eps_rel: float
    eps_abs: float
    eigenvalues: np.ndarray

    @property
    def threshold(self) -> float:
        top = self.eigenvalues[0] if len(self.eigenvalues) else 0.0
        return max(self.eps_abs, self.eps_rel * top)

    @property
    def kept(self) -> np.ndarray:
        return self.eigenvalues[: self.n]


def effective_dimension(spectrum, eps_rel: float = DEFAULT_EPS_REL,
                        eps_abs: float = DEFAULT_EPS_ABS) -> EffectiveDimension:
    """Count eigenvalues strictly above ``max(eps_abs, eps_rel * lambda_max)``."""
    vals = spectrum.eigenvalues if isinstance(spectrum, Spectrum) else np.asarray(spectrum, dtype=float)
    vals = np.asarray(vals, dtype=float).reshape(-1)
    if len(vals) == 0:
        raise InputError("empty spectrum")
    if np.any(np.diff(vals) > 0):
        raise InputError("spectrum must be sorted in descending order")
    if eps_rel < 0 or eps_abs < 0:
        raise InputError("thresholds must be nonnegative")
    cut = max(eps_abs, eps_rel * vals[0])
    return EffectiveDimension(n=int(np.sum(vals > cut)), eps_rel=eps_rel, eps_abs=eps_abs,
                              eigenvalues=vals.copy())


def hessian_spectrum(theta, model: LossModel) -> Spectrum:
    """Spectrum of the analytic Hessian, or of the Gauss-Newton matrix when none exists."""
    try:
        h = model.hessian(theta)
    except UnsupportedError:
        h = gauss_newton_hessian(theta, model)
    return sym_eig(h)


def spectrum_to_csv(eigenvalues, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "eigenvalue"])
        for i, v in enumerate(np.asarray(eigenvalues, dtype=float)):
            w.writerow([i, repr(float(v))])

