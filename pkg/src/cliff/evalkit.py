"""Evaluation: Spearman MCC, cliff-threshold detection, quantized agreement, landscapes."""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import find_peaks
from scipy.stats import rankdata

from . import diffgraph as dg
from .criterion import CliffWeights, choose_zeta_rows, loss_biv, loss_kl_uni, loss_uni
from .density import KernelConfig, marginal_pdf, marginal_pdf_derivative, standardize
from .synthdata import GridDensitySpec, quantize, true_quantize

MAX_EXHAUSTIVE_D = 8


class UndefinedCorrelation(ValueError):
    pass


@dataclass
class MccReport:
    corr: list[list[float]]
    assignment: list[int]
    signs: list[int]
    mcc: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


@dataclass
class ThresholdReport:
    thresholds: list[list[float]]
    peak_heights: list[list[float]]
    agreement: float | None = None
    permutation: list[int] | None = None
    reversal: list[int] | None = None
    structural_mismatch: bool = False
    counts_match: bool = True
    per_factor_agreement: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def spearman(x, y) -> float:
    """Pearson correlation of average-tie ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two equal-length vectors")
    if x.size < 3:
        raise ValueError("spearman needs at least 3 samples")
    rx, ry = rankdata(x) - (x.size + 1) / 2.0, rankdata(y) - (y.size + 1) / 2.0
    sx, sy = math.sqrt(np.dot(rx, rx)), math.sqrt(np.dot(ry, ry))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelation("zero rank variance")
    return float(np.clip(np.dot(rx, ry) / (sx * sy), -1.0, 1.0))


def best_assignment(score: np.ndarray) -> tuple[int, ...]:
    """Permutation perm maximizing sum_i score[i, perm[i]], by exhaustive search."""
    d = score.shape[0]
    if d > MAX_EXHAUSTIVE_D:
        raise ValueError(f"exhaustive assignment limited to d <= {MAX_EXHAUSTIVE_D}")
    best, best_val = None, -np.inf
    rows = np.arange(d)
    for perm in itertools.permutations(range(d)):
        val = score[rows, perm].sum()
        if val > best_val + 1e-15:
            best, best_val = perm, val
    return best


def mcc(true_z, recovered_z) -> MccReport:
    """Mean absolute Spearman correlation under the best factor matching (0-100)."""
    t, r = np.asarray(true_z, dtype=np.float64), np.asarray(recovered_z, dtype=np.float64)
    if t.shape[0] != r.shape[0]:
        raise ValueError("true and recovered factors need the same sample count")
    d = t.shape[1]
    if r.shape[1] != d:
        raise ValueError("true and recovered factors need the same dimension")
    raw = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            try:
                raw[i, j] = spearman(t[:, i], r[:, j])
            except UndefinedCorrelation:
                warnings.warn(f"constant column in pair ({i}, {j}); correlation set to 0")
                raw[i, j] = 0.0
    corr = np.abs(raw)
    perm = best_assignment(corr)
    signs = [1 if raw[i, perm[i]] >= 0 else -1 for i in range(d)]
    score = 100.0 * float(np.mean(corr[np.arange(d), perm]))
    return MccReport(corr.tolist(), list(perm), signs, score)


def _is_support_edge(dens, k: int, direction: float, reach: int, edge_fraction: float) -> bool:
    # density on the low side of the cliff relative to the high side
    lo = dens[max(k - reach, 0)] if direction > 0 else dens[min(k + reach, len(dens) - 1)]
    hi = dens[min(k + reach, len(dens) - 1)] if direction > 0 else dens[max(k - reach, 0)]
    return lo < edge_fraction * hi


def detect_thresholds(batch, cfg: KernelConfig = KernelConfig(), min_prominence: float = 0.3,
                      edge_fraction: float = 0.1, standardized: bool = False) -> ThresholdReport:
    """Interior cliffs of each factor's KDE marginal.

    Peaks of |dp/dz| with prominence at least ``min_prominence`` times the
    factor's global maximum are kept, except support edges: a peak where the
    density on the low side falls below ``edge_fraction`` of the high side, or
    the outermost peak on either side when the density rises into the support
    there.
    """
    z = np.asarray(batch, dtype=np.float64)
    if not standardized:
        z = standardize(z).values.value
    grid = cfg.grid()
    reach = max(1, int(round(3 * cfg.sigma / cfg.spacing)))
    found, heights = [], []
    for i in range(z.shape[1]):
        deriv = marginal_pdf_derivative(z, i, grid, cfg).values.value
        dens = marginal_pdf(z, i, grid, cfg).values.value
        mag = np.abs(deriv)
        top = mag.max()
        if top <= 0:
            found.append([])
            heights.append([])
            continue
        # pad so a maximum on the first/last grid point still counts as a peak
        padded = np.concatenate([[0.0], mag, [0.0]])
        peaks, _ = find_peaks(padded, prominence=min_prominence * top)
        peaks = peaks - 1
        edges = {k for k in peaks if _is_support_edge(dens, k, np.sign(deriv[k]), reach, edge_fraction)}
        # The support is bounded, so the outermost inward-facing cliffs are its edges.
        if len(peaks) and deriv[peaks[0]] > 0:
            edges.add(peaks[0])
        if len(peaks) and deriv[peaks[-1]] < 0:
            edges.add(peaks[-1])
        keep = [k for k in peaks if k not in edges]
        found.append([float(grid[k]) for k in keep])
        heights.append([float(mag[k]) for k in keep])
    return ThresholdReport(found, heights)


def quantized_agreement(true_z, true_spec: GridDensitySpec, recovered_z, detected) -> ThresholdReport:
    """Best exact-match rate of quantized vectors over factor permutations and reversals.

    ``detected`` holds per-factor thresholds in the standardized coordinates of
    ``recovered_z`` (a :class:`ThresholdReport` or nested lists).
    """
    report = detected if isinstance(detected, ThresholdReport) else ThresholdReport(list(detected), [[] for _ in detected])
    thresholds = report.thresholds
    d = len(true_spec.thresholds)
    if d > MAX_EXHAUSTIVE_D:
        raise ValueError(f"exhaustive relabeling limited to d <= {MAX_EXHAUSTIVE_D}")
    r = standardize(np.asarray(recovered_z, dtype=np.float64)).values.value
    q_true = true_quantize(true_z, true_spec)
    q_rec = quantize(r, thresholds)
    true_counts = [len(ts) for ts in true_spec.thresholds]
    rec_counts = [len(ts) for ts in thresholds]

    best = (-1.0, None, None, None)
    for perm in itertools.permutations(range(d)):
        matched = [true_counts[i] == rec_counts[perm[i]] for i in range(d)]
        for signs in itertools.product((1, -1), repeat=d):
            ok = np.ones(len(r), dtype=bool)
            per_factor = []
            for i in range(d):
                j = perm[i]
                col = q_rec[:, j] if signs[i] > 0 else rec_counts[j] - q_rec[:, j]
                hit = col == q_true[:, i]
                per_factor.append(float(hit.mean()))
                if matched[i]:
                    ok &= hit
            if not any(matched):
                ok[:] = False
            rate = float(ok.mean()) if all(matched) else float(ok.mean()) * sum(matched) / d
            if rate > best[0]:
                best = (rate, perm, signs, per_factor)
    rate, perm, signs, per_factor = best
    counts_match = sorted(true_counts) == sorted(rec_counts)
    report.agreement = rate
    report.permutation = list(perm)
    report.reversal = list(signs)
    report.per_factor_agreement = per_factor
    report.counts_match = counts_match
    report.structural_mismatch = not all(true_counts[i] == rec_counts[perm[i]] for i in range(d))
    return report


def projection(theta1_deg: float, theta2_deg: float) -> np.ndarray:
    t1, t2 = np.deg2rad(theta1_deg), np.deg2rad(theta2_deg)
    return np.array([[np.cos(t1), np.sin(t1)], [np.cos(t2), np.sin(t2)]])


def rotate(z, degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return np.asarray(z) @ R.T


LANDSCAPE_COLUMNS = ("theta1_deg", "theta2_deg", "l_uni", "l_biv", "l_kl_uni", "total", "singular")


def _angles(step_degrees: float) -> np.ndarray:
    if not 0 < step_degrees <= 90:
        raise ValueError("step must be in (0, 90]")
    count = int(round(180.0 / step_degrees))
    if not math.isclose(count * step_degrees, 180.0):
        raise ValueError("step must divide 180 degrees")
    return step_degrees * np.arange(count)


def landscape_uni(latents, step_degrees: float = 5.0, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """Rows (theta, entropy of the normalized derivative of z . (cos theta, sin theta))."""
    z = np.asarray(latents, dtype=np.float64)
    rows = []
    for th in _angles(step_degrees):
        w = np.array([np.cos(np.deg2rad(th)), np.sin(np.deg2rad(th))])
        proj = (z @ w)[:, None]
        rows.append((th, loss_uni(standardize(proj), cfg).item()))
    return np.array(rows)


def landscape_sweep(latents, step_degrees: float = 5.0, weights: CliffWeights = CliffWeights(),
                    zeta_seed: int = 0, sweep_step: float | None = None) -> list[tuple]:
    """Evaluate every loss term on z' = W z over a (theta1, theta2) grid.

    Conditioning rows are drawn once from ``zeta_seed`` and reused for every
    cell. Rows with theta1 == theta2 (mod 180) are flagged singular.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ValueError("landscape sweep needs a 2-factor batch")
    angles = _angles(step_degrees if sweep_step is None else sweep_step)
    cfg = weights.kernel
    rows_idx = choose_zeta_rows(len(z), weights.m_conditioning, zeta_seed, weights.zeta_policy)
    # entropy and KL of a single projection depend on one angle only
    uni, kl = {}, {}
    for th in angles:
        w = np.array([np.cos(np.deg2rad(th)), np.sin(np.deg2rad(th))])
        sb = standardize((z @ w)[:, None])
        uni[th] = loss_uni(sb, cfg).item()
        kl[th] = loss_kl_uni(sb, cfg).item()
    out = []
    for t1 in angles:
        for t2 in angles:
            zp = z @ projection(t1, t2).T
            singular = bool(np.isclose((t1 - t2) % 180.0, 0.0))
            if singular:
                zp[:, 1] = zp[:, 0]  # identical columns; avoid rounding noise between them
            l_u = uni[t1] + uni[t2]
            l_k = kl[t1] + kl[t2]
            l_b = loss_biv(standardize(zp), cfg, weights, zeta_rows=rows_idx).item()
            total = weights.lambda_uni * l_u + weights.lambda_biv * l_b + weights.lambda_kl_uni * l_k
            out.append((float(t1), float(t2), l_u, l_b, l_k, total, singular))
    return out


def congruent(angle: float, target: float, tol: float, period: float = 180.0) -> bool:
    delta = (angle - target) % period
    return min(delta, period - delta) <= tol + 1e-9
