"""Piecewise-uniform latents on an axis-aligned grid, and the nonlinear mixing."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np


class SpecError(ValueError):
    pass


@dataclass
class GridDensitySpec:
    """Cells of [0,1]^d cut by per-factor thresholds, each with its own mass."""

    thresholds: list[list[float]]
    cell_masses: np.ndarray
    min_jump: float = 2.0

    def __post_init__(self):
        self.thresholds = [[float(t) for t in ts] for ts in self.thresholds]
        self.cell_masses = np.asarray(self.cell_masses, dtype=np.float64)
        self.validate()

    @property
    def d(self) -> int:
        return len(self.thresholds)

    @property
    def bins_per_factor(self) -> tuple[int, ...]:
        return tuple(len(ts) + 1 for ts in self.thresholds)

    def edges(self, i: int) -> np.ndarray:
        return np.concatenate([[0.0], self.thresholds[i], [1.0]])

    def cell_volumes(self) -> np.ndarray:
        widths = [np.diff(self.edges(i)) for i in range(self.d)]
        vol = widths[0]
        for w in widths[1:]:
            vol = np.multiply.outer(vol, w)
        return vol

    def cell_densities(self) -> np.ndarray:
        return self.cell_masses / self.cell_volumes()

    def validate(self) -> None:
        if self.d < 1:
            raise SpecError("need at least one factor")
        for i, ts in enumerate(self.thresholds):
            arr = np.asarray(ts)
            if arr.size and (arr[0] <= 0.0 or arr[-1] >= 1.0):
                raise SpecError(f"thresholds of factor {i} must lie strictly inside (0, 1)")
            if np.any(np.diff(arr) <= 0):
                raise SpecError(f"thresholds of factor {i} must be strictly increasing")
        if self.cell_masses.shape != self.bins_per_factor:
            raise SpecError(f"cell_masses has shape {self.cell_masses.shape}, expected {self.bins_per_factor}")
        if np.any(self.cell_masses <= 0):
            raise SpecError("cell masses must be positive")
        if abs(self.cell_masses.sum() - 1.0) > 1e-9:
            raise SpecError(f"cell masses sum to {self.cell_masses.sum()}, expected 1")
        ratio = self.min_adjacent_ratio()
        if ratio < self.min_jump:
            raise SpecError(f"adjacent-cell density ratio {ratio:.3f} is below min_jump {self.min_jump}")

    def min_adjacent_ratio(self) -> float:
        """Smallest density ratio (high/low) between cells sharing a threshold face."""
        dens = self.cell_densities()
        best = np.inf
        for axis in range(self.d):
            if dens.shape[axis] < 2:
                continue
            a = np.take(dens, range(dens.shape[axis] - 1), axis=axis)
            b = np.take(dens, range(1, dens.shape[axis]), axis=axis)
            best = min(best, float(np.min(np.maximum(a, b) / np.minimum(a, b))))
        return best

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "cell_masses": self.cell_masses.tolist(),
            "min_jump": self.min_jump,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridDensitySpec":
        return cls(data["thresholds"], np.asarray(data["cell_masses"]), data.get("min_jump", 2.0))


@dataclass
class MixingSpec:
    """x = B tanh(A (scale * z))."""

    A: np.ndarray
    B: np.ndarray
    scale: float = 0.5
    max_condition: float = 20.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        if self.A.shape[0] != self.A.shape[1] or self.B.shape[1] != self.A.shape[0]:
            raise SpecError(f"incompatible mixing shapes A {self.A.shape}, B {self.B.shape}")
        for name, mat in (("A", self.A), ("B", self.B)):
            cond = np.linalg.cond(mat)
            if not np.isfinite(cond) or cond > self.max_condition:
                raise SpecError(f"{name} has condition number {cond:.3g} > {self.max_condition}")

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist(), "scale": self.scale, "max_condition": self.max_condition}

    @classmethod
    def from_dict(cls, data: dict) -> "MixingSpec":
        return cls(data["A"], data["B"], data.get("scale", 0.5), data.get("max_condition", 20.0))

    @classmethod
    def identity(cls, d: int, scale: float = 0.5) -> "MixingSpec":
        return cls(np.eye(d), np.eye(d), scale)


@dataclass
class LatentBatch:
    values: np.ndarray
    kind: str = "z"  # "z" true latents, "x" observations, "z_hat" recovered
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def random_thresholds(counts, rng, min_gap: float = 0.15) -> list[list[float]]:
    """Sorted cut points per factor, at least ``min_gap`` apart and from the box faces."""
    out = []
    for c in counts:
        for _ in range(10_000):
            ts = np.sort(rng.uniform(min_gap, 1.0 - min_gap, size=c))
            if c < 2 or np.min(np.diff(ts)) >= min_gap:
                break
        else:
            raise SpecError(f"cannot place {c} thresholds with gap {min_gap}")
        out.append([float(t) for t in ts])
    return out


def random_grid_spec(threshold_counts=(2, 1), seed=0, min_jump: float = 2.0,
                     jump_range=(2.5, 4.0), noise: float = 0.1) -> GridDensitySpec:
    """Random grid density whose cells all differ by at least ``min_jump``.

    Log-densities are a sum of per-factor step profiles with alternating jumps
    of log-uniform size in ``jump_range``, plus a small per-cell perturbation;
    draws violating ``min_jump`` are rejected.
    """
    rng = np.random.default_rng(seed)
    thresholds = random_thresholds(threshold_counts, rng)
    lo, hi = np.log(jump_range[0]), np.log(jump_range[1])
    for _ in range(1000):
        log_dens = np.zeros([c + 1 for c in threshold_counts])
        for axis, c in enumerate(threshold_counts):
            sign = rng.choice([-1.0, 1.0])
            steps = [0.0]
            for _k in range(c):
                steps.append(steps[-1] + sign * rng.uniform(lo, hi))
                sign = -sign
            shape = [1] * len(threshold_counts)
            shape[axis] = c + 1
            log_dens = log_dens + np.reshape(steps, shape)
        log_dens = log_dens + rng.uniform(-noise, noise, size=log_dens.shape)
        probe = GridDensitySpec.__new__(GridDensitySpec)
        probe.thresholds, probe.min_jump = thresholds, min_jump
        probe.cell_masses = np.exp(log_dens) * probe.cell_volumes()
        probe.cell_masses /= probe.cell_masses.sum()
        if probe.min_adjacent_ratio() >= min_jump:
            return GridDensitySpec(thresholds, probe.cell_masses, min_jump)
    raise SpecError("could not draw cell masses satisfying min_jump")


def random_mixing(d: int, seed=0, scale: float = 0.5, max_condition: float = 20.0) -> MixingSpec:
    rng = np.random.default_rng(seed)
    for _ in range(10_000):
        A = rng.normal(size=(d, d))
        B = rng.normal(size=(d, d))
        if np.linalg.cond(A) <= max_condition and np.linalg.cond(B) <= max_condition:
            return MixingSpec(A, B, scale, max_condition)
    raise SpecError("could not draw well-conditioned mixing matrices")


def sample_latents(spec: GridDensitySpec, n: int, seed=0) -> LatentBatch:
    """Pick a cell by mass, then a uniform point inside it."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    flat = spec.cell_masses.reshape(-1)
    cells = rng.choice(flat.size, size=n, p=flat / flat.sum())
    idx = np.unravel_index(cells, spec.cell_masses.shape)
    u = rng.uniform(size=(n, spec.d))
    z = np.empty((n, spec.d))
    for i in range(spec.d):
        e = spec.edges(i)
        lo, hi = e[idx[i]], e[idx[i] + 1]
        z[:, i] = lo + u[:, i] * (hi - lo)
    return LatentBatch(z, "z")


def mix(latents, mixing: MixingSpec) -> LatentBatch:
    z = latents.values if isinstance(latents, LatentBatch) else np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != mixing.A.shape[1]:
        raise SpecError(f"latent dimension {z.shape} does not match A {mixing.A.shape}")
    x = np.tanh(mixing.scale * z @ mixing.A.T) @ mixing.B.T
    return LatentBatch(x, "x")


def unmix(observed, mixing: MixingSpec) -> np.ndarray:
    """Closed-form inverse of :func:`mix`."""
    x = observed.values if isinstance(observed, LatentBatch) else np.asarray(observed, dtype=np.float64)
    inner = np.linalg.solve(mixing.B, x.T).T
    return np.linalg.solve(mixing.A, np.arctanh(inner).T).T / mixing.scale


def true_quantize(latents, spec: GridDensitySpec) -> np.ndarray:
    """Bin index per factor: number of thresholds strictly below the value."""
    z = latents.values if isinstance(latents, LatentBatch) else np.asarray(latents, dtype=np.float64)
    if np.any(z < 0.0) or np.any(z > 1.0):
        raise ValueError("samples outside the [0, 1]^d support")
    return quantize(z, spec.thresholds)


def quantize(z: np.ndarray, thresholds) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty(z.shape, dtype=np.int64)
    for i, ts in enumerate(thresholds):
        out[:, i] = np.searchsorted(np.asarray(ts, dtype=np.float64), z[:, i], side="left")
    return out


def four_factor_spec(seed=0) -> GridDensitySpec:
    return random_grid_spec((4, 3, 4, 3), seed=seed)


@dataclass
class Dataset:
    z: np.ndarray
    x: np.ndarray
    spec: GridDensitySpec | None = None
    mixing: MixingSpec | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)


def make_dataset(threshold_counts=(2, 1), n: int = 5000, seed: int = 0, min_jump: float = 2.0,
                 identity_mixing: bool = False, scale: float = 0.5, max_condition: float = 20.0) -> Dataset:
    # independent streams for spec, mixing and sampling
    spec_seed, mix_seed, sample_seed = np.random.SeedSequence(seed).spawn(3)
    spec = random_grid_spec(threshold_counts, seed=spec_seed, min_jump=min_jump)
    d = len(threshold_counts)
    mixing = MixingSpec.identity(d, scale) if identity_mixing else random_mixing(d, mix_seed, scale, max_condition)
    z = sample_latents(spec, n, sample_seed).values
    x = z.copy() if identity_mixing else mix(z, mixing).values
    return Dataset(z, x, spec, mixing, seed, {"identity_mixing": identity_mixing})


def write_dataset(ds: Dataset, csv_path, json_path) -> None:
    d, D = ds.z.shape[1], ds.x.shape[1]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z_{i + 1}" for i in range(d)] + [f"x_{i + 1}" for i in range(D)])
        for row in np.hstack([ds.z, ds.x]):
            w.writerow([f"{v:.17g}" for v in row])
    side = {
        "seed": ds.seed,
        "d": d,
        "D": D,
        "n": int(ds.z.shape[0]),
        "spec": ds.spec.to_dict() if ds.spec is not None else None,
        "mixing": ds.mixing.to_dict() if ds.mixing is not None else None,
        **ds.meta,
    }
    with open(json_path, "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(csv_path, json_path=None) -> Dataset:
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64)
    zc = [k for k, h in enumerate(header) if h.startswith("z_")]
    xc = [k for k, h in enumerate(header) if h.startswith("x_")]
    if not zc and not xc:
        raise ValueError(f"{csv_path}: no z_* or x_* columns")
    body = body.reshape(-1, len(header))
    ds = Dataset(body[:, zc], body[:, xc])
    if json_path is not None:
        with open(json_path) as fh:
            side = json.load(fh)
        ds.seed = side.get("seed")
        if side.get("spec"):
            ds.spec = GridDensitySpec.from_dict(side["spec"])
        if side.get("mixing"):
            ds.mixing = MixingSpec.from_dict(side["mixing"])
        ds.meta = {k: v for k, v in side.items() if k not in ("seed", "spec", "mixing", "d", "D", "n")}
    return ds


def cell_frequencies(z: np.ndarray, spec: GridDensitySpec) -> np.ndarray:
    bins = true_quantize(z, spec)
    counts = np.zeros(spec.bins_per_factor)
    for cell in itertools.product(*[range(b) for b in spec.bins_per_factor]):
        counts[cell] = np.all(bins == np.array(cell), axis=1).sum()
    return counts / len(z)
