"""Dense symmetric linear algebra, seeded random streams, histograms and log-log fits.

Symmetric matrices are plain ``numpy`` arrays; :func:`as_symmetric` validates
and returns an exactly symmetric copy.  Eigen-decompositions go through
:func:`sym_eig`, which runs cyclic Jacobi sweeps for small matrices and hands
larger ones to LAPACK.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FitError, InputError, NotPSDError

JACOBI_MAX_DIM = 128
JACOBI_TOL = 1e-12
DEFAULT_CLAMP_TOL = 1e-10


def as_symmetric(m, rtol: float = 1e-8) -> np.ndarray:
    """Return ``m`` as an exactly symmetric float array.

    Asymmetry up to ``rtol`` (relative to the largest entry) is averaged away;
    anything larger is an input error.
    """
    a = np.array(m, dtype=float, copy=True)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError("matrix has non-finite entries")
    scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
    if np.max(np.abs(a - a.T)) > rtol * scale:
        raise InputError("matrix is not symmetric")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues sorted descending with matching orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _jacobi_eig(a: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 100):
    n = a.shape[0]
    a = a.copy()
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if norm == 0.0 or n == 1:
        return np.diag(a).copy(), v
    for _ in range(max_sweeps):
        # direct sum; ||A||^2 - sum diag^2 cancels long before 1e-12
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off < tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    sign = 1.0 if theta >= 0.0 else -1.0
                    t = sign / (abs(theta) + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("Jacobi sweeps did not converge")
    return np.diag(a).copy(), v


def sym_eig(m, method: str = "auto") -> Spectrum:
    """Eigen-decomposition of a real symmetric matrix, eigenvalues descending.

    ``method`` is ``"jacobi"`` (cyclic Jacobi rotations), ``"lapack"``
    (``numpy.linalg.eigh``) or ``"auto"``, which uses Jacobi up to
    ``JACOBI_MAX_DIM`` and LAPACK beyond.
    """
    a = as_symmetric(m)
    n = a.shape[0]
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        w, v = _jacobi_eig(a)
    elif method == "lapack":
        w, v = np.linalg.eigh(a)
    else:
        raise InputError(f"unknown eigensolver method {method!r}")
    order = np.argsort(-w, kind="stable")
    return Spectrum(eigenvalues=w[order], eigenvectors=v[:, order])


def eigvals_desc(m) -> np.ndarray:
    """Eigenvalues only (LAPACK), sorted descending; for large spectra in diagnostics."""
    a = as_symmetric(m)
    return np.linalg.eigvalsh(a)[::-1].copy()


def psd_sqrt(m, clamp_tol: float = DEFAULT_CLAMP_TOL) -> np.ndarray:
    """Symmetric square root of a PSD matrix.

    Eigenvalues in ``[-clamp_tol * lambda_max, 0)`` are treated as round-off
    and clamped to zero; anything more negative raises :class:`NotPSDError`.
    """
    spec = sym_eig(m)
    lam = spec.eigenvalues
    lam_max = max(lam[0], 0.0)
    if lam[-1] < -clamp_tol * lam_max or (lam_max == 0.0 and lam[-1] < 0.0):
        raise NotPSDError(f"smallest eigenvalue {lam[-1]:.3e} below -{clamp_tol:g} * {lam_max:.3e}")
    root = np.sqrt(np.clip(lam, 0.0, None))
    v = spec.eigenvectors
    s = (v * root) @ v.T
    return 0.5 * (s + s.T)


def psd_pinv(m, clamp_tol: float = DEFAULT_CLAMP_TOL) -> np.ndarray:
    """Moore-Penrose inverse of a PSD matrix with the same clamping rule as :func:`psd_sqrt`."""
    spec = sym_eig(m)
    lam = spec.eigenvalues
    lam_max = max(lam[0], 0.0)
    if lam[-1] < -clamp_tol * lam_max:
        raise NotPSDError(f"smallest eigenvalue {lam[-1]:.3e} below -{clamp_tol:g} * {lam_max:.3e}")
    cut = clamp_tol * lam_max
    inv = np.where(lam > cut, 1.0 / np.where(lam > cut, lam, 1.0), 0.0)
    v = spec.eigenvectors
    return (v * inv) @ v.T


def loglog_fit(xs, ys, weights=None) -> tuple[float, float, float]:
    """Weighted least squares of ``log y`` on ``log x``.

    Returns ``(slope, intercept, r2)`` with natural logarithms.  Points with
    zero weight are dropped before the fit.
    """
    x = np.asarray(xs, dtype=float).ravel()
    y = np.asarray(ys, dtype=float).ravel()
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).ravel()
    if not (len(x) == len(y) == len(w)):
        raise InputError("xs, ys and weights must have equal length")
    if np.any(w < 0):
        raise InputError("weights must be nonnegative")
    keep = w > 0
    x, y, w = x[keep], y[keep], w[keep]
    if len(x) < 2:
        raise FitError(f"need at least 2 weighted points, got {len(x)}")
    if np.any(x <= 0) or np.any(y <= 0):
        raise InputError("log-log fit needs strictly positive xs and ys")
    lx, ly = np.log(x), np.log(y)
    sw = w.sum()
    mx, my = (w * lx).sum() / sw, (w * ly).sum() / sw
    sxx = (w * (lx - mx) ** 2).sum()
    if sxx == 0.0:
        raise FitError("all xs coincide; slope undefined")
    sxy = (w * (lx - mx) * (ly - my)).sum()
    slope = sxy / sxx
    intercept = my - slope * mx
    syy = (w * (ly - my) ** 2).sum()
    resid = (w * (ly - intercept - slope * lx) ** 2).sum()
    r2 = 1.0 - resid / syy if syy > 0 else 1.0
    return float(slope), float(intercept), float(r2)


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Streams are keyed through :class:`numpy.random.SeedSequence` spawn keys and
    drive a counter-based Philox generator, so substreams are statistically
    independent and their draws do not depend on how other streams are
    interleaved or on the number of threads.
    """

    def __init__(self, seed: int, stream_id: int | Sequence[int] = 0):
        if isinstance(stream_id, (int, np.integer)):
            key = (int(stream_id),)
        else:
            key = tuple(int(k) for k in stream_id)
        self.seed = int(seed)
        self.key = key
        ss = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    @property
    def stream_id(self) -> int:
        return self.key[-1]

    def substream(self, i: int) -> "RngStream":
        """Independent child stream; deterministic in ``(seed, key, i)``."""
        return RngStream(self.seed, self.key + (int(i),))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self.generator.integers(0, high, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"


def standard_normal(rng: RngStream) -> float:
    return float(rng.normal())


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    def density(self) -> np.ndarray:
        return self.counts / (self.total * self.widths)


def histogram(samples, edges, weights=None) -> Histogram:
    """Bin ``samples`` into ``edges``; samples outside the edges are ignored.

    With ``weights`` the counts are float sums of weights rather than integers.
    """
    e = np.asarray(edges, dtype=float)
    if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0) or not np.all(np.isfinite(e)):
        raise InputError("bin edges must be a finite, strictly increasing vector of length >= 2")
    counts, _ = np.histogram(np.asarray(samples, dtype=float), bins=e, weights=weights)
    return Histogram(bin_edges=e, counts=counts)


def _weighted_ecdf(samples, weights, at):
    order = np.argsort(samples, kind="stable")
    s = samples[order]
    cw = np.concatenate([[0.0], np.cumsum(weights[order])])
    return cw[np.searchsorted(s, at, side="right")] / cw[-1]


def ks_distance(a, b, weights_a=None, weights_b=None) -> float:
    """Two-sample Kolmogorov-Smirnov distance ``sup |F_a - F_b|`` between weighted ECDFs."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) == 0 or len(b) == 0:
        raise InputError("KS distance needs nonempty samples")
    wa = np.ones_like(a) if weights_a is None else np.asarray(weights_a, dtype=float).ravel()
    wb = np.ones_like(b) if weights_b is None else np.asarray(weights_b, dtype=float).ravel()
    if wa.shape != a.shape or wb.shape != b.shape:
        raise InputError("weights must match their samples")
    if np.any(wa < 0) or np.any(wb < 0) or wa.sum() <= 0 or wb.sum() <= 0:
        raise InputError("weights must be nonnegative with a positive total")
    at = np.concatenate([a, b])
    return float(np.max(np.abs(_weighted_ecdf(a, wa, at) - _weighted_ecdf(b, wb, at))))
