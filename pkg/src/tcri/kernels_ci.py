"""RBF kernels, HSIC and class-conditional dependence penalties.

Two parallel surfaces live here: plain numpy estimators for scoring and
testing, and ``*_t`` variants built from :mod:`tcri.diff_core` primitives so
the penalties backpropagate into the representations. Bandwidths are always
computed on detached values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from . import diff_core as dc
from .diff_core import Tensor

__all__ = [
    "Gram",
    "CenteringMatrix",
    "median_bandwidth",
    "rbf_gram",
    "hsic_v",
    "conditional_hsic",
    "conditional_cross_cov",
    "hsic_t",
    "conditional_hsic_t",
    "conditional_cross_cov_t",
    "quantile_bins",
    "DegenerateClassesError",
]


class DegenerateClassesError(ValueError):
    """No class slice has the two rows an estimate needs."""


@dataclass(frozen=True)
class Gram:
    matrix: np.ndarray
    bandwidth: float
    kind: str = "rbf"

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class CenteringMatrix:
    """H = I - (1/n) 11^T, kept implicit; ``apply`` centres rows and columns."""

    n: int

    def dense(self) -> np.ndarray:
        return np.eye(self.n) - np.full((self.n, self.n), 1.0 / self.n)

    def apply(self, k: np.ndarray) -> np.ndarray:
        """Return H k H without forming H."""
        return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"expected an n x d matrix, got shape {x.shape}")
    return x


def median_bandwidth(x) -> float:
    """Median pairwise Euclidean distance over distinct pairs; 1.0 if it is 0."""
    x = _as_2d(x)
    if x.shape[0] < 2:
        raise ValueError("median_bandwidth needs at least two rows")
    med = float(np.median(pdist(x)))
    return med if med > 0 else 1.0


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def rbf_gram(x, bandwidth: float) -> Gram:
    x = _as_2d(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("rbf_gram input must be finite")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    # exact differences rather than the expanded form: the Gram must match
    # elementwise evaluation to round-off
    # scaling before squaring keeps tiny bandwidths from underflowing to 0
    diff = (x[:, None, :] - x[None, :, :]) / bandwidth
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return Gram(np.exp(-0.5 * d2), float(bandwidth))


def hsic_v(kx: Gram | np.ndarray, ky: Gram | np.ndarray) -> float:
    """Biased (V-statistic) HSIC: trace(Kx H Ky H) / n^2."""
    a = kx.matrix if isinstance(kx, Gram) else np.asarray(kx, dtype=np.float64)
    b = ky.matrix if isinstance(ky, Gram) else np.asarray(ky, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"Gram size mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ValueError("hsic_v needs n >= 2")
    ac = CenteringMatrix(n).apply(a)
    return float(np.sum(ac * b.T) / n**2)


def _class_slices(labels, num_classes: int, n: int):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError("labels must be a vector matching the row count")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    slices, skipped = [], 0
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        if idx.size >= 2:
            slices.append(idx)
        elif idx.size == 1:
            skipped += 1
    if not slices:
        raise DegenerateClassesError("no class has at least two rows")
    if skipped:
        warnings.warn(f"{skipped} class slice(s) with a single row skipped", RuntimeWarning, stacklevel=3)
    return slices


def _hsic_from_samples(a: np.ndarray, b: np.ndarray) -> float:
    return hsic_v(rbf_gram(a, median_bandwidth(a)), rbf_gram(b, median_bandwidth(b)))


def conditional_hsic(phi, psi, labels, num_classes: int) -> float:
    """Average over classes of the HSIC between ``phi`` and ``psi`` rows of that class."""
    phi, psi = _as_2d(phi), _as_2d(psi)
    if phi.shape[0] != psi.shape[0]:
        raise ValueError("phi and psi must have the same number of rows")
    slices = _class_slices(labels, num_classes, phi.shape[0])
    return float(np.mean([_hsic_from_samples(phi[i], psi[i]) for i in slices]))


def _cross_cov_sq(a: np.ndarray, b: np.ndarray) -> float:
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    c = ac.T @ bc / a.shape[0]
    return float(np.sum(c * c))


def conditional_cross_cov(phi, psi, labels, num_classes: int) -> float:
    """Average over classes of the squared Frobenius norm of the cross-covariance."""
    phi, psi = _as_2d(phi), _as_2d(psi)
    if phi.shape[0] != psi.shape[0]:
        raise ValueError("phi and psi must have the same number of rows")
    slices = _class_slices(labels, num_classes, phi.shape[0])
    return float(np.mean([_cross_cov_sq(phi[i], psi[i]) for i in slices]))


def quantile_bins(y, num_bins: int) -> np.ndarray:
    """Integer bin index in ``0..num_bins-1`` from the empirical quantiles of ``y``."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if num_bins < 1:
        raise ValueError("num_bins must be positive")
    if num_bins == 1:
        return np.zeros(y.size, dtype=np.int64)
    edges = np.quantile(y, np.linspace(0.0, 1.0, num_bins + 1)[1:-1])
    return np.searchsorted(edges, y, side="right").astype(np.int64)


# ------------------------------------------------------ differentiable versions


def _rbf_from_rows(x: np.ndarray, bw: float) -> np.ndarray:
    return np.exp(-0.5 * _sq_dists(x / bw))


def _rbf_vjp(x: np.ndarray, k: np.ndarray, bw: float, gk: np.ndarray) -> np.ndarray:
    # d/dx_a sum_ij G_ij K_ij = -(1/bw^2) sum_j (G_aj + G_ja) K_aj (x_a - x_j)
    m = (gk + gk.T) * k
    return -(m.sum(axis=1)[:, None] * x - m @ x) / (bw * bw)


def hsic_t(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable V-statistic HSIC with median-heuristic RBF kernels.

    A single fused primitive: the bandwidths are constants, and the
    vector-Jacobian product uses d HSIC / dK = H L H / n^2.
    """
    if a.ndim == 1:
        a = dc.reshape(a, (-1, 1))
    if b.ndim == 1:
        b = dc.reshape(b, (-1, 1))
    if a.shape[0] != b.shape[0]:
        raise ValueError("hsic_t needs the same number of rows in both inputs")
    n = a.shape[0]
    av, bv = a.value, b.value
    bwa, bwb = median_bandwidth(av), median_bandwidth(bv)
    k, l = _rbf_from_rows(av, bwa), _rbf_from_rows(bv, bwb)  # noqa: E741
    centre = CenteringMatrix(n).apply
    kc, lc = centre(k), centre(l)
    value = np.asarray(np.sum(kc * l) / n**2)

    def vjp(g):
        scale = float(g) / n**2
        return _rbf_vjp(av, k, bwa, scale * lc), _rbf_vjp(bv, l, bwb, scale * kc)

    return dc.custom_op(value, (a, b), vjp)


def _cross_cov_t(a: Tensor, b: Tensor) -> Tensor:
    n = a.shape[0]
    ac = dc.sub(a, dc.mean(a, axis=0))
    bc = dc.sub(b, dc.mean(b, axis=0))
    c = dc.scale(dc.matmul(dc.transpose(ac), bc), 1.0 / n)
    return dc.sum(dc.square(c))


def _conditional_t(estimator, phi: Tensor, psi: Tensor, labels, num_classes: int) -> Tensor:
    if phi.ndim == 1:
        phi = dc.reshape(phi, (-1, 1))
    if psi.ndim == 1:
        psi = dc.reshape(psi, (-1, 1))
    if phi.shape[0] != psi.shape[0]:
        raise ValueError("phi and psi must have the same number of rows")
    slices = _class_slices(labels, num_classes, phi.shape[0])
    # fixed class order keeps the reduction bit-reproducible
    total = None
    for idx in slices:
        term = estimator(dc.take_rows(phi, idx), dc.take_rows(psi, idx))
        total = term if total is None else dc.add(total, term)
    return dc.scale(total, 1.0 / len(slices))


def conditional_hsic_t(phi: Tensor, psi: Tensor, labels, num_classes: int) -> Tensor:
    return _conditional_t(hsic_t, phi, psi, labels, num_classes)


def conditional_cross_cov_t(phi: Tensor, psi: Tensor, labels, num_classes: int) -> Tensor:
    return _conditional_t(_cross_cov_t, phi, psi, labels, num_classes)
