"""Cliff loss: peaky marginal derivatives, aligned conditional cliffs, anti-collapse."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffgraph as dg
from .density import (
    DegenerateFactorError,
    DensityGrid,
    KernelConfig,
    StandardizedBatch,
    conditional_derivative,
    integrate,
    marginal_pdf,
    marginal_pdf_derivative,
    standardize,
)
from .diffgraph import EPS, Tensor

SQRT3 = math.sqrt(3.0)
UNIFORM_ENTROPY = math.log(2.0 * SQRT3)
DIVERGENCES = ("jsd", "hellinger")
ZETA_POLICIES = ("random", "first")


@dataclass(frozen=True)
class CliffWeights:
    lambda_uni: float = 0.0
    lambda_biv: float = 1.0
    lambda_kl_uni: float = 1.0
    m_conditioning: int = 20
    kernel: KernelConfig = KernelConfig()
    divergence: str = "jsd"
    zeta_policy: str = "random"
    uniform_points: str = "grid"

    def __post_init__(self):
        lams = (self.lambda_uni, self.lambda_biv, self.lambda_kl_uni)
        if any(lam < 0 for lam in lams):
            raise ValueError("loss weights must be nonnegative")
        if not any(lam > 0 for lam in lams):
            raise ValueError("at least one loss weight must be positive")
        if self.m_conditioning < 1:
            raise ValueError("m_conditioning must be >= 1")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"divergence must be one of {DIVERGENCES}")
        if self.zeta_policy not in ZETA_POLICIES:
            raise ValueError(f"zeta_policy must be one of {ZETA_POLICIES}")
        if self.uniform_points not in ("grid", "random"):
            raise ValueError("uniform_points must be 'grid' or 'random'")


@dataclass
class CliffLossReport:
    l_uni: float
    l_biv: float
    l_kl_uni: float
    total: float
    weights: tuple[float, float, float]
    per_factor_entropy: list[float] = field(default_factory=list)
    per_pair_jsd: list[list[float]] = field(default_factory=list)

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **asdict(self)})


def _as_standardized(batch) -> StandardizedBatch:
    return batch if isinstance(batch, StandardizedBatch) else standardize(batch)


def normalized_derivative_magnitude(batch, i: int, cfg: KernelConfig = KernelConfig()) -> DensityGrid:
    """|dp/dz_i| rescaled to integrate to one on the grid."""
    deriv = marginal_pdf_derivative(batch, i, None, cfg)
    mag = dg.abs_(deriv.values)
    c = dg.scale(dg.sum_(mag), cfg.spacing)
    if c.item() < 1e-12:
        raise DegenerateFactorError(f"flat density for factor {i}: derivative mass {c.item():.3g}", i)
    return DensityGrid(deriv.grid_points, mag / c, cfg.spacing, "normalized_derivative_magnitude")


def differential_entropy(density: DensityGrid) -> Tensor:
    """-integral of v log v on the grid; one value per column for K x M grids."""
    v = density.values
    return dg.scale(dg.sum_(v * dg.log(v, eps=EPS), axis=0), -density.spacing)


def loss_uni(batch, cfg: KernelConfig = KernelConfig(), per_factor=None) -> Tensor:
    sb = _as_standardized(batch)
    terms = []
    for i in range(sb.d):
        h = differential_entropy(normalized_derivative_magnitude(sb, i, cfg))
        terms.append(h)
        if per_factor is not None:
            per_factor.append(h.item())
    return _total(terms)


def _total(terms) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def generalized_jsd(profiles: DensityGrid) -> Tensor:
    """Entropy of the mixture minus mean entropy of the M column densities."""
    mix = DensityGrid(profiles.grid_points, dg.mean(profiles.values, axis=1), profiles.spacing, "mixture")
    return differential_entropy(mix) - dg.mean(differential_entropy(profiles))


def generalized_hellinger(profiles: DensityGrid) -> Tensor:
    """Mean squared Hellinger distance of each column to the mixture."""
    v = profiles.values
    mix = dg.mean(v, axis=1, keepdims=True)
    affinity = dg.scale(dg.sum_(dg.sqrt(v * mix, eps=EPS), axis=0), profiles.spacing)
    return 1.0 - dg.mean(affinity)


def conditional_profiles(batch, i: int, j: int, zeta, cfg: KernelConfig = KernelConfig()) -> DensityGrid:
    """Columns are |d p(z_i|z_j=zeta_m)/dz_i| normalized to unit mass."""
    cond = conditional_derivative(batch, i, j, None, zeta, cfg)
    u = dg.abs_(cond.values)
    mass = dg.scale(dg.sum_(u, axis=0, keepdims=True), cfg.spacing)
    flat = np.flatnonzero(mass.value.reshape(-1) < 1e-12)
    if flat.size:
        raise DegenerateFactorError(f"flat conditional for pair ({i}, {j}) at conditioning index {int(flat[0])}", i)
    return DensityGrid(cond.grid_points, u / mass, cfg.spacing, "conditional_derivative_magnitude")


def jsd_pairwise(batch, i: int, j: int, zeta, cfg: KernelConfig = KernelConfig(), divergence: str = "jsd") -> Tensor:
    if i == j:
        raise ValueError("jsd_pairwise needs i != j")
    profiles = conditional_profiles(batch, i, j, zeta, cfg)
    if divergence == "hellinger":
        return generalized_hellinger(profiles)
    return generalized_jsd(profiles)


def choose_zeta_rows(n: int, m: int, rng=None, policy: str = "random") -> np.ndarray:
    """Row indices whose factor values serve as conditioning points."""
    if m > n:
        raise ValueError(f"need at least M={m} samples for conditioning, batch has {n}")
    if policy == "first":
        return np.arange(m)
    rng = np.random.default_rng(rng)
    return np.sort(rng.choice(n, size=m, replace=False))


def loss_biv(batch, cfg: KernelConfig = KernelConfig(), weights: CliffWeights | None = None,
             zeta_rows=None, rng=None, per_pair=None) -> Tensor:
    """Sum of divergences over ordered factor pairs (i | j), j != i.

    Conditioning values for z_j are the batch's own values at ``zeta_rows``, so
    they stay differentiable.
    """
    weights = weights or CliffWeights(kernel=cfg)
    sb = _as_standardized(batch)
    if sb.d < 2:
        raise ValueError("loss_biv needs at least two factors")
    if zeta_rows is None:
        zeta_rows = choose_zeta_rows(sb.n, weights.m_conditioning, rng, weights.zeta_policy)
    zeta_rows = np.asarray(zeta_rows)
    terms = []
    for j in range(sb.d):
        zeta = sb.values[zeta_rows, j]
        for i in range(sb.d):
            if i == j:
                continue
            t = jsd_pairwise(sb, i, j, zeta, cfg, weights.divergence)
            terms.append(t)
            if per_pair is not None:
                per_pair[i][j] = t.item()
    return _total(terms)


def uniform_points(k: int, rng=None, mode: str = "grid") -> np.ndarray:
    """Evaluation points for expectations under U(-sqrt3, sqrt3)."""
    if mode == "random":
        return np.random.default_rng(rng).uniform(-SQRT3, SQRT3, size=k)
    h = 2.0 * SQRT3 / k
    return -SQRT3 + h * (np.arange(k) + 0.5)


def loss_kl_uni(batch, cfg: KernelConfig = KernelConfig(), points=None) -> Tensor:
    """Sum over factors of KL(U(-sqrt3, sqrt3) || p(z_i)).

    Uses the exact uniform entropy log(2 sqrt3), so the term vanishes when the
    estimated marginal equals the uniform on the evaluation points.
    """
    sb = _as_standardized(batch)
    pts = uniform_points(cfg.grid_k) if points is None else np.asarray(points, dtype=np.float64)
    terms = []
    for i in range(sb.d):
        p = marginal_pdf(sb, i, pts, cfg).values
        terms.append(dg.scale(dg.mean(dg.log(p, eps=EPS)), -1.0) - UNIFORM_ENTROPY)
    return _total(terms)


def total_loss(batch, weights: CliffWeights = CliffWeights(), rng=None, zeta_rows=None):
    """Weighted Cliff loss of a raw (unstandardized) n x d batch.

    Returns the scalar graph node and a :class:`CliffLossReport`.
    """
    batch = dg.as_tensor(batch)
    if batch.ndim != 2:
        raise dg.ShapeError(f"expected an n x d batch, got {batch.shape}")
    cfg = weights.kernel
    sb = standardize(batch)
    d = sb.d
    rng = np.random.default_rng(rng)

    entropies: list[float] = []
    pairs = [[0.0] * d for _ in range(d)]
    zero = dg.constant(0.0)

    l_uni = loss_uni(sb, cfg, entropies)
    if d >= 2:
        if zeta_rows is None:
            zeta_rows = choose_zeta_rows(sb.n, weights.m_conditioning, rng, weights.zeta_policy)
        l_biv = loss_biv(sb, cfg, weights, zeta_rows=zeta_rows, per_pair=pairs)
    else:
        l_biv = zero
    pts = None
    if weights.uniform_points == "random":
        pts = uniform_points(cfg.grid_k, rng, "random")
    l_kl = loss_kl_uni(sb, cfg, pts)

    total = (
        dg.scale(l_uni, weights.lambda_uni)
        + dg.scale(l_biv, weights.lambda_biv)
        + dg.scale(l_kl, weights.lambda_kl_uni)
    )
    report = CliffLossReport(
        l_uni=l_uni.item(),
        l_biv=l_biv.item(),
        l_kl_uni=l_kl.item(),
        total=total.item(),
        weights=(weights.lambda_uni, weights.lambda_biv, weights.lambda_kl_uni),
        per_factor_entropy=entropies,
        per_pair_jsd=pairs,
    )
    if not np.isfinite(report.total):
        raise FloatingPointError(f"non-finite Cliff loss: {report}")
    return total, report
