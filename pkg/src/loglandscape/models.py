"""Loss models: linear regression, a small MLP with manual backprop, analytic potentials.

Every model implements the :class:`LossModel` surface.  Mean-square models use
the convention ``l_mu = (f(theta, x_mu) - y_mu)**2 / 2`` and
``L = mean(l_mu)``, so ``grad l_mu = residual * grad f``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, InputError, UnsupportedError
from .numerics import RngStream, psd_pinv


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=float)
        y = np.ascontiguousarray(self.labels, dtype=float).ravel()
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] < 1:
            raise DimensionError(f"inputs {x.shape} and labels {y.shape} do not describe N >= 1 samples")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InputError("dataset has non-finite entries")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x_{i}" for i in range(self.dim)] + ["y"])
            for xi, yi in zip(self.inputs, self.labels):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[-1] != "y" or any(h != f"x_{i}" for i, h in enumerate(header[:-1])):
            raise InputError(f"unexpected dataset header {header}")
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
        return cls(inputs=data[:, :-1], labels=data[:, -1])


def linreg_generate(d: int, n: int, rng: RngStream) -> Dataset:
    """Gaussian inputs and independent Gaussian labels (no teacher)."""
    if d < 1 or n < 1:
        raise InputError("d and N must be >= 1")
    x = rng.normal((n, d))
    y = rng.normal(n)
    return Dataset(x, y)


def binary_teacher_generate(d: int, n: int, rng: RngStream) -> Dataset:
    """Gaussian inputs labelled +-1 by the sign of a random linear teacher."""
    if d < 1 or n < 1:
        raise InputError("d and N must be >= 1")
    teacher = rng.normal(d)
    x = rng.normal((n, d))
    y = np.where(x @ teacher >= 0.0, 1.0, -1.0)
    return Dataset(x, y)


class LossModel:
    """Interface shared by every loss model.

    Subclasses implement :meth:`residuals_and_grads` or override the
    per-sample methods directly.  ``batch_grad`` is the hot path used by the
    SGD engine.
    """

    param_dim: int
    n_samples: int

    def per_sample_loss(self, theta, mu: int) -> float:
        return float(self.per_sample_losses(theta)[mu])

    def per_sample_losses(self, theta) -> np.ndarray:
        raise NotImplementedError

    def per_sample_grad(self, theta, mu: int) -> np.ndarray:
        return self.per_sample_grads(theta, [mu])[0]

    def per_sample_grads(self, theta, idx=None) -> np.ndarray:
        """Gradients of ``l_mu`` for the selected samples, shape (len(idx), P)."""
        raise NotImplementedError

    def output_grad(self, theta, mu: int) -> np.ndarray:
        return self.output_grads(theta, [mu])[0]

    def output_grads(self, theta, idx=None) -> np.ndarray:
        raise UnsupportedError(f"{type(self).__name__} does not expose output gradients")

    def full_loss(self, theta) -> float:
        return float(np.mean(self.per_sample_losses(theta)))

    def full_grad(self, theta) -> np.ndarray:
        return self.batch_grad(theta, None)

    def batch_grad(self, theta, idx) -> np.ndarray:
        return np.mean(self.per_sample_grads(theta, idx), axis=0)

    def hessian(self, theta) -> np.ndarray:
        raise UnsupportedError(f"{type(self).__name__} has no analytic Hessian")

    def _check_theta(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float).reshape(-1)
        if t.shape[0] != self.param_dim:
            raise DimensionError(f"theta has {t.shape[0]} entries, model expects {self.param_dim}")
        return t


class LinearRegression(LossModel):
    """Mean-square loss of the linear predictor ``f(theta, x) = theta . x``."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.x = dataset.inputs
        self.y = dataset.labels
        self.n_samples, self.param_dim = self.x.shape
        self._gram = self.x.T @ self.x / self.n_samples
        self._minimum = None

    def residuals(self, theta, idx=None) -> np.ndarray:
        t = self._check_theta(theta)
        if idx is None:
            return self.x @ t - self.y
        idx = np.asarray(idx)
        return self.x[idx] @ t - self.y[idx]

    def per_sample_losses(self, theta) -> np.ndarray:
        return 0.5 * self.residuals(theta) ** 2

    def per_sample_grads(self, theta, idx=None) -> np.ndarray:
        r = self.residuals(theta, idx)
        x = self.x if idx is None else self.x[np.asarray(idx)]
        return r[:, None] * x

    def batch_grad(self, theta, idx) -> np.ndarray:
        r = self.residuals(theta, idx)
        x = self.x if idx is None else self.x[np.asarray(idx)]
        return x.T @ r / len(r)

    def output_grads(self, theta, idx=None) -> np.ndarray:
        self._check_theta(theta)
        return self.x.copy() if idx is None else self.x[np.asarray(idx)]

    def hessian(self, theta=None) -> np.ndarray:
        return self._gram.copy()

    def minimum(self) -> tuple[np.ndarray, float]:
        """Exact minimiser and minimum loss from the normal equations."""
        if self._minimum is None:
            theta = psd_pinv(self._gram) @ (self.x.T @ self.y / self.n_samples)
            self._minimum = (theta, self.full_loss(theta))
        theta, loss = self._minimum
        return theta.copy(), loss

    def losses_at(self, thetas) -> np.ndarray:
        """``L`` at many parameter vectors via ``L* + (theta-theta*)' H (theta-theta*) / 2``.

        Exact for this quadratic loss and avoids an O(N) pass per point.
        """
        center, base = self.minimum()
        dev = np.atleast_2d(np.asarray(thetas, dtype=float)) - center
        return base + 0.5 * np.einsum("ni,ij,nj->n", dev, self._gram, dev)


def linreg_model(dataset: Dataset) -> LinearRegression:
    return LinearRegression(dataset)


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0.0).astype(float)


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "identity": (lambda z: z, np.ones_like),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


class MLP(LossModel):
    """Fully connected network with scalar linear output and mean-square loss.

    Parameters are flattened layer by layer as ``[W_1, b_1, W_2, b_2, ...]``
    with ``W_l`` of shape ``(width_l, width_{l-1})`` in row-major order.
    """

    def __init__(self, layer_widths: Sequence[int], activation: str, dataset: Dataset):
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise InputError(f"invalid layer widths {layer_widths}")
        if widths[0] != dataset.dim:
            raise DimensionError(f"first width {widths[0]} != input dimension {dataset.dim}")
        if widths[-1] != 1:
            raise DimensionError("last width must be 1 (scalar output)")
        if activation not in _ACTIVATIONS:
            raise InputError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self._act, self._act_grad = _ACTIVATIONS[activation]
        self.dataset = dataset
        self.x = dataset.inputs
        self.y = dataset.labels
        self.n_samples = dataset.n_samples
        self._shapes = []
        offset = 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self._shapes.append((offset, fan_out, fan_in))
            offset += fan_out * fan_in + fan_out
        self.param_dim = offset

    def init_params(self, rng: RngStream) -> np.ndarray:
        """Glorot-normal weights (variance 2 / (fan_in + fan_out)), zero biases."""
        theta = np.zeros(self.param_dim)
        for off, fan_out, fan_in in self._shapes:
            std = np.sqrt(2.0 / (fan_in + fan_out))
            theta[off:off + fan_out * fan_in] = std * rng.normal(fan_out * fan_in)
        return theta

    def unpack(self, theta):
        t = self._check_theta(theta)
        layers = []
        for off, fan_out, fan_in in self._shapes:
            w = t[off:off + fan_out * fan_in].reshape(fan_out, fan_in)
            b = t[off + fan_out * fan_in:off + fan_out * fan_in + fan_out]
            layers.append((w, b))
        return layers

    def _forward(self, layers, x):
        acts, pre = [x], []
        h = x
        for i, (w, b) in enumerate(layers):
            z = h @ w.T + b
            pre.append(z)
            h = z if i == len(layers) - 1 else self._act(z)
            acts.append(h)
        return acts, pre

    def predict(self, theta, x=None) -> np.ndarray:
        x = self.x if x is None else np.atleast_2d(np.asarray(x, dtype=float))
        acts, _ = self._forward(self.unpack(theta), x)
        return acts[-1][:, 0]

    def _backward_deltas(self, layers, pre, seed):
        # seed: (n, 1) derivative of the quantity wrt the network output
        deltas = [None] * len(layers)
        delta = seed
        for i in range(len(layers) - 1, -1, -1):
            deltas[i] = delta
            if i > 0:
                w, _ = layers[i]
                delta = (delta @ w) * self._act_grad(pre[i - 1])
        return deltas

    def _select(self, idx):
        if idx is None:
            return self.x, self.y
        idx = np.asarray(idx)
        return self.x[idx], self.y[idx]

    def _jacobian(self, layers, acts, deltas) -> np.ndarray:
        n = acts[0].shape[0]
        out = np.empty((n, self.param_dim))
        for (off, fan_out, fan_in), a, d in zip(self._shapes, acts[:-1], deltas):
            nw = fan_out * fan_in
            out[:, off:off + nw] = np.einsum("ni,nj->nij", d, a).reshape(n, nw)
            out[:, off + nw:off + nw + fan_out] = d
        return out

    def per_sample_losses(self, theta) -> np.ndarray:
        return 0.5 * (self.predict(theta) - self.y) ** 2

    def output_grads(self, theta, idx=None) -> np.ndarray:
        layers = self.unpack(theta)
        x, _ = self._select(idx)
        acts, pre = self._forward(layers, x)
        deltas = self._backward_deltas(layers, pre, np.ones((x.shape[0], 1)))
        return self._jacobian(layers, acts, deltas)

    def per_sample_grads(self, theta, idx=None) -> np.ndarray:
        layers = self.unpack(theta)
        x, y = self._select(idx)
        acts, pre = self._forward(layers, x)
        r = acts[-1] - y[:, None]
        deltas = self._backward_deltas(layers, pre, r)
        return self._jacobian(layers, acts, deltas)

    def batch_grad(self, theta, idx) -> np.ndarray:
        layers = self.unpack(theta)
        x, y = self._select(idx)
        n = x.shape[0]
        acts, pre = self._forward(layers, x)
        r = acts[-1] - y[:, None]
        deltas = self._backward_deltas(layers, pre, r / n)
        g = np.empty(self.param_dim)
        for (off, fan_out, fan_in), a, d in zip(self._shapes, acts[:-1], deltas):
            nw = fan_out * fan_in
            g[off:off + nw] = (d.T @ a).ravel()
            g[off + nw:off + nw + fan_out] = d.sum(axis=0)
        return g

    def tangent_kernel(self, theta, idx=None):
        """Residuals and the sample-space Gram matrix ``K[mu, nu] = grad f_mu . grad f_nu``.

        Built layer by layer from activations and back-propagated deltas, so
        the (N, P) Jacobian is never formed.
        """
        layers = self.unpack(theta)
        x, y = self._select(idx)
        acts, pre = self._forward(layers, x)
        deltas = self._backward_deltas(layers, pre, np.ones((x.shape[0], 1)))
        k = np.zeros((x.shape[0], x.shape[0]))
        for a, d in zip(acts[:-1], deltas):
            k += (d @ d.T) * (a @ a.T + 1.0)
        return acts[-1][:, 0] - y, 0.5 * (k + k.T)

    def noise_terms(self, theta):
        """``(mean |grad l_mu|^2, grad L)`` from a single full-batch backward pass."""
        layers = self.unpack(theta)
        acts, pre = self._forward(layers, self.x)
        n = self.n_samples
        r = acts[-1] - self.y[:, None]
        deltas = self._backward_deltas(layers, pre, np.ones((n, 1)))
        sq = np.zeros(n)
        g = np.empty(self.param_dim)
        for (off, fan_out, fan_in), a, d in zip(self._shapes, acts[:-1], deltas):
            sq += np.sum(d * d, axis=1) * (np.sum(a * a, axis=1) + 1.0)
            nw = fan_out * fan_in
            dr = d * (r / n)
            g[off:off + nw] = (dr.T @ a).ravel()
            g[off + nw:off + nw + fan_out] = dr.sum(axis=0)
        return float(np.mean(r[:, 0] ** 2 * sq)), g


def mlp_model(layer_widths: Sequence[int], activation: str, dataset: Dataset, init_rng: RngStream | None = None):
    """Build an :class:`MLP` and, if ``init_rng`` is given, its Glorot initial parameters.

    Returns ``(model, theta0)``; ``theta0`` is ``None`` without an rng.
    """
    model = MLP(layer_widths, activation, dataset)
    theta0 = model.init_params(init_rng) if init_rng is not None else None
    return model, theta0


@dataclass(frozen=True)
class CriticalPoint:
    kind: str  # "minimum" or "saddle"
    location: np.ndarray
    loss: float
    hessian: np.ndarray


class AnalyticPotential(LossModel):
    """Separable landscape ``L0 + sum_i [a_i (theta_i^2 - w_i^2)^2 + k_i theta_i^2 / 2]``.

    Coordinates with ``a_i > 0`` are double wells (minima at ``+-w_i``, a
    barrier at 0); coordinates with ``a_i = 0`` are harmonic with curvature
    ``k_i``.  ``L0 > 0`` keeps the loss strictly positive so ``log L`` exists.
    Treated as a one-sample "dataset" so it plugs into the SGD/SDE engines.
    """

    n_samples = 1

    def __init__(self, quartic, wells, curvatures, offset: float):
        a = np.atleast_1d(np.asarray(quartic, dtype=float))
        w = np.atleast_1d(np.asarray(wells, dtype=float))
        k = np.atleast_1d(np.asarray(curvatures, dtype=float))
        if not (a.shape == w.shape == k.shape) or a.ndim != 1:
            raise DimensionError("quartic, wells and curvatures must be equal-length vectors")
        if offset <= 0 or np.any(a < 0) or np.any(k < 0) or np.any(w < 0):
            raise InputError("potential parameters must be nonnegative and the offset positive")
        if np.any((a > 0) & (w <= 0)):
            raise InputError("double-well coordinates need w > 0")
        self.a, self.w, self.k = a, w, k
        self.offset = float(offset)
        self.param_dim = len(a)
        self.catalog = self._build_catalog()

    def loss(self, theta) -> np.ndarray | float:
        """Vectorised over leading axes of ``theta`` (last axis = coordinates)."""
        t = np.asarray(theta, dtype=float)
        per = self.a * (t * t - self.w ** 2) ** 2 + 0.5 * self.k * t * t
        out = self.offset + per.sum(axis=-1)
        return float(out) if np.ndim(out) == 0 else out

    def grad(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        return 4.0 * self.a * t * (t * t - self.w ** 2) + self.k * t

    def hessian(self, theta) -> np.ndarray:
        t = self._check_theta(theta)
        return np.diag(4.0 * self.a * (3.0 * t * t - self.w ** 2) + self.k)

    def per_sample_losses(self, theta) -> np.ndarray:
        return np.array([self.loss(self._check_theta(theta))])

    def per_sample_grads(self, theta, idx=None) -> np.ndarray:
        return self.grad(self._check_theta(theta))[None, :]

    def batch_grad(self, theta, idx) -> np.ndarray:
        return self.grad(self._check_theta(theta))

    def full_loss(self, theta) -> float:
        return float(self.loss(self._check_theta(theta)))

    def _build_catalog(self):
        wells = np.flatnonzero(self.a > 0)
        minimum = np.where(self.a > 0, self.w, 0.0)
        pts = [CriticalPoint("minimum", minimum, self.loss(minimum), self.hessian(minimum))]
        if len(wells):
            e = wells[0]
            mirrored = minimum.copy()
            mirrored[e] = -mirrored[e]
            pts.append(CriticalPoint("minimum", mirrored, self.loss(mirrored), self.hessian(mirrored)))
            saddle = minimum.copy()
            saddle[e] = 0.0
            pts.append(CriticalPoint("saddle", saddle, self.loss(saddle), self.hessian(saddle)))
        return pts

    def minimum(self) -> CriticalPoint:
        return self.catalog[0]

    def saddle(self) -> CriticalPoint:
        for p in self.catalog:
            if p.kind == "saddle":
                return p
        raise UnsupportedError("potential has no saddle")

    @property
    def escape_axis(self) -> int:
        wells = np.flatnonzero(self.a > 0)
        if not len(wells):
            raise UnsupportedError("potential has no double-well coordinate")
        return int(wells[0])


def double_well(a: float, w: float, offset: float) -> AnalyticPotential:
    """``L0 + a (theta^2 - w^2)^2``: minima at ``+-w`` with curvature ``8 a w^2``, barrier at 0."""
    if a <= 0 or w <= 0 or offset <= 0:
        raise InputError("double_well needs a, w, L0 > 0")
    return AnalyticPotential([a], [w], [0.0], offset)


def nd_quadratic_well(curvatures, offset: float) -> AnalyticPotential:
    k = np.atleast_1d(np.asarray(curvatures, dtype=float))
    if np.any(k <= 0):
        raise InputError("quadratic well curvatures must be positive")
    return AnalyticPotential(np.zeros_like(k), np.zeros_like(k), k, offset)


def nd_double_well(axis: int, a: float, w: float, offset: float, transverse) -> AnalyticPotential:
    """Double well along coordinate ``axis``, harmonic with curvatures ``transverse`` elsewhere."""
    tr = np.atleast_1d(np.asarray(transverse, dtype=float))
    if a <= 0 or w <= 0 or offset <= 0 or np.any(tr <= 0):
        raise InputError("nd_double_well needs a, w, L0 and transverse curvatures > 0")
    dim = len(tr) + 1
    if not 0 <= axis < dim:
        raise InputError(f"axis {axis} out of range for dimension {dim}")
    quartic = np.zeros(dim)
    wells = np.zeros(dim)
    curv = np.insert(tr, axis, 0.0)
    quartic[axis] = a
    wells[axis] = w
    return AnalyticPotential(quartic, wells, curv, offset)
