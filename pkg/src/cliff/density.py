"""Parzen-window densities and density derivatives on a fixed 1-D grid.

All estimators take standardized factor columns as graph tensors, so every
quantity here can be backpropagated to the encoder that produced the batch.
"""

from __future__ import annotations

import contextlib
import csv
import math
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .diffgraph import Tensor

SQRT_2PI = math.sqrt(2.0 * math.pi)
DEGENERATE_STD = 1e-8


class DegenerateFactorError(ValueError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 0.1
    grid_a: float = -5.0
    grid_b: float = 5.0
    grid_k: int = 100

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.grid_a < self.grid_b:
            raise ValueError(f"grid_a must be < grid_b, got [{self.grid_a}, {self.grid_b}]")
        if self.grid_k < 2:
            raise ValueError(f"grid_k must be >= 2, got {self.grid_k}")

    @property
    def spacing(self) -> float:
        return (self.grid_b - self.grid_a) / self.grid_k

    def grid(self) -> np.ndarray:
        # left endpoints: a, a+h, ..., b-h
        return self.grid_a + self.spacing * np.arange(self.grid_k)


@dataclass
class StandardizedBatch:
    values: Tensor
    means: np.ndarray
    stds: np.ndarray
    degenerate: list[int] = field(default_factory=list)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def column(self, i: int) -> Tensor:
        return self.values[:, i]


@dataclass
class DensityGrid:
    grid_points: np.ndarray
    values: Tensor
    spacing: float
    kind: str

    def to_csv(self, path) -> None:
        v = self.values.value
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if v.ndim == 1:
                w.writerow(["grid_point", "value"])
                for g, val in zip(self.grid_points, v):
                    w.writerow([repr(float(g)), repr(float(val))])
            else:
                w.writerow(["grid_point", "value", "conditioning_index"])
                for m in range(v.shape[1]):
                    for g, val in zip(self.grid_points, v[:, m]):
                        w.writerow([repr(float(g)), repr(float(val)), m])


# Kernel-evaluation instrumentation, per thread.
_counters = threading.local()


@contextlib.contextmanager
def count_kernels():
    """Collect kernel-evaluation counts by category for the enclosed block."""
    counter = Counter()
    stack = getattr(_counters, "stack", [])
    _counters.stack = stack + [counter]
    try:
        yield counter
    finally:
        _counters.stack = stack


def _tally(category: str, count: int) -> None:
    for c in getattr(_counters, "stack", ()):
        c[category] += count


def standardize(batch) -> StandardizedBatch:
    """Zero-mean, unit-variance columns (population variance), differentiably."""
    batch = dg.as_tensor(batch)
    if batch.ndim != 2:
        raise dg.ShapeError(f"standardize expects n x d, got {batch.shape}")
    n = batch.shape[0]
    if n < 2:
        raise ValueError("standardize needs at least 2 samples")
    raw_std = batch.value.std(axis=0)
    bad = [int(i) for i in np.flatnonzero(raw_std < DEGENERATE_STD)]
    if bad:
        raise DegenerateFactorError(f"factor column {bad[0]} is degenerate (std {raw_std[bad[0]]:.3g})", bad[0])
    mu = dg.mean(batch, axis=0, keepdims=True)
    centered = batch - mu
    var = dg.mean(centered * centered, axis=0, keepdims=True)
    std = dg.sqrt(var)
    return StandardizedBatch(
        values=centered / std,
        means=mu.value.reshape(-1).copy(),
        stds=std.value.reshape(-1).copy(),
    )


def _column(batch, i: int) -> Tensor:
    if isinstance(batch, StandardizedBatch):
        batch = batch.values
    batch = dg.as_tensor(batch)
    if batch.ndim == 1:
        if i != 0:
            raise IndexError(f"factor index {i} out of range for a single column")
        return batch
    if not 0 <= i < batch.shape[1]:
        raise IndexError(f"factor index {i} out of range for d={batch.shape[1]}")
    return batch[:, i]


def _points(at, cfg: KernelConfig) -> np.ndarray:
    return cfg.grid() if at is None else np.asarray(at, dtype=np.float64).reshape(-1)


def _as_column(at) -> Tensor:
    at = dg.as_tensor(at)
    return dg.reshape(at, (-1, 1)) if at.ndim == 1 else at


def gaussian_kernel(at, samples: Tensor, sigma: float) -> Tensor:
    """Matrix of N(at_g; sample_k, sigma^2), shape len(at) x n.

    Fused graph op: the backward pass reuses the stored differences instead of
    chaining sub/mul/exp nodes over the full K x n matrix.
    """
    at = _as_column(at)
    samples = dg.reshape(samples, (1, -1))
    diff = at.value - samples.value
    out = np.exp(diff * diff * (-0.5 / sigma**2)) * (1.0 / (sigma * SQRT_2PI))

    def back(g):
        gd = g * out * diff * (-1.0 / sigma**2)
        return gd.sum(axis=1, keepdims=True), -gd.sum(axis=0, keepdims=True)

    return dg.custom(out, (at, samples), back, "gaussian_kernel")


def gaussian_kernel_derivative(at, samples: Tensor, sigma: float) -> Tensor:
    """Matrix of d/dt N(t; sample_k, sigma^2) at t = at_g, shape len(at) x n."""
    at = _as_column(at)
    samples = dg.reshape(samples, (1, -1))
    diff = at.value - samples.value
    kern = np.exp(diff * diff * (-0.5 / sigma**2)) * (1.0 / (sigma * SQRT_2PI))
    inv_s2 = 1.0 / sigma**2
    out = diff * kern * (-inv_s2)

    def back(g):
        # d/d(diff) of -diff N / s^2 is N (diff^2 / s^4 - 1 / s^2)
        gd = g * kern * (diff * diff * inv_s2 - 1.0) * inv_s2
        return gd.sum(axis=1, keepdims=True), -gd.sum(axis=0, keepdims=True)

    return dg.custom(out, (at, samples), back, "gaussian_kernel_derivative")


def _grid_derivative_kernel(batch, i: int, cfg: KernelConfig) -> Tensor:
    # Shared by the univariate and bivariate terms within one batch.
    samples = _column(batch, i)
    if not isinstance(batch, StandardizedBatch):
        return gaussian_kernel_derivative(cfg.grid(), samples, cfg.sigma)
    key = ("grid_derivative", i, cfg)
    if key not in batch.cache:
        batch.cache[key] = gaussian_kernel_derivative(cfg.grid(), samples, cfg.sigma)
    return batch.cache[key]


def marginal_pdf(batch, i: int, at=None, cfg: KernelConfig = KernelConfig()) -> DensityGrid:
    samples = _column(batch, i)
    pts = _points(at, cfg)
    _tally("marginal", pts.size * samples.shape[0])
    vals = dg.mean(gaussian_kernel(pts, samples, cfg.sigma), axis=1)
    return DensityGrid(pts, vals, cfg.spacing, "marginal")


def marginal_pdf_derivative(batch, i: int, at=None, cfg: KernelConfig = KernelConfig()) -> DensityGrid:
    samples = _column(batch, i)
    pts = _points(at, cfg)
    _tally("marginal_derivative", pts.size * samples.shape[0])
    if at is None:
        kern = _grid_derivative_kernel(batch, i, cfg)
    else:
        kern = gaussian_kernel_derivative(pts, samples, cfg.sigma)
    vals = dg.mean(kern, axis=1)
    return DensityGrid(pts, vals, cfg.spacing, "marginal_derivative")


def _conditioning_kernel(zeta, col_j: Tensor, cfg: KernelConfig) -> Tensor:
    zeta = dg.as_tensor(zeta)
    if zeta.ndim == 0:
        zeta = dg.reshape(zeta, (1,))
    # n x M: N(zeta_m; z_j^(k), sigma^2)
    return gaussian_kernel(dg.reshape(col_j, (-1, 1)), zeta, cfg.sigma)


def joint_pdf_partial(batch, i: int, j: int, at_i=None, at_j=None, cfg: KernelConfig = KernelConfig()) -> DensityGrid:
    """d p(z_i, z_j) / d z_i on grid x conditioning values (K x M).

    The product kernel factorizes, so the (g, m) entry is the mean over samples
    of the derivative kernel in i times the plain kernel in j, which is a
    K x n by n x M matrix product.
    """
    if i == j:
        raise ValueError("joint_pdf_partial needs two distinct factors")
    col_i, col_j = _column(batch, i), _column(batch, j)
    if at_j is None:
        raise ValueError("joint_pdf_partial needs conditioning values at_j")
    pts = _points(at_i, cfg)
    n = col_i.shape[0]
    if at_i is None:
        deriv = _grid_derivative_kernel(batch, i, cfg)  # K x n
    else:
        deriv = gaussian_kernel_derivative(pts, col_i, cfg.sigma)
    cond = _conditioning_kernel(at_j, col_j, cfg)  # n x M
    _tally("joint", pts.size * cond.shape[1] * n)
    vals = dg.scale(deriv @ cond, 1.0 / n)
    return DensityGrid(pts, vals, cfg.spacing, "joint_partial")


def conditional_derivative(batch, i: int, j: int, at_i=None, zeta=None, cfg: KernelConfig = KernelConfig()) -> DensityGrid:
    """d p(z_i | z_j = zeta_m) / d z_i, one column per conditioning value."""
    joint = joint_pdf_partial(batch, i, j, at_i, zeta, cfg)
    zeta_t = dg.as_tensor(zeta)
    if zeta_t.ndim == 0:
        zeta_t = dg.reshape(zeta_t, (1,))
    col_j = _column(batch, j)
    _tally("conditioning", zeta_t.shape[0] * col_j.shape[0])
    p_zeta = dg.mean(gaussian_kernel(zeta_t, col_j, cfg.sigma), axis=1)  # M
    low = np.flatnonzero(p_zeta.value < 1e-12)
    if low.size:
        raise ConditioningError(f"p(z_{j}) vanishes at conditioning value index {int(low[0])}")
    # p(zeta) >= 1e-12 is guaranteed above, so no epsilon is needed here
    vals = dg.div(joint.values, dg.reshape(p_zeta, (1, -1)))
    return DensityGrid(joint.grid_points, vals, cfg.spacing, "conditional_derivative")


def integrate(values) -> Tensor:
    """Left-endpoint Riemann sum: spacing * sum over the grid axis."""
    if isinstance(values, DensityGrid):
        return dg.scale(dg.sum_(values.values, axis=0), values.spacing)
    raise TypeError("integrate expects a DensityGrid")
