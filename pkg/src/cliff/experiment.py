"""Seeded synthetic identification runs: generate, train, evaluate."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .config import RunConfig
from .evalkit import detect_thresholds, mcc, quantized_agreement
from .synthdata import Dataset, make_dataset
from .trainer import TrainResult, encode_numpy, train


@dataclass
class SeedOutcome:
    seed: int
    mcc: float
    agreement: float
    detected_counts: list[int]
    true_counts: list[int]
    counts_match: bool
    initial_loss: float
    final_loss: float

    def to_dict(self) -> dict:
        return asdict(self)


def dataset_for(cfg: RunConfig) -> Dataset:
    data = cfg.data
    return make_dataset(
        tuple(data.threshold_counts),
        n=data.n_samples,
        seed=cfg.seeds.dataset_seed,
        min_jump=data.min_jump,
        identity_mixing=data.identity_mixing,
        scale=data.mixing_scale,
        max_condition=data.max_condition,
    )


def seeded_config(base: RunConfig, seed: int) -> RunConfig:
    return base.with_seeds(dataset_seed=seed, init_seed=seed, zeta_seed=10_000 + seed)


def evaluate(ds: Dataset, recovered: np.ndarray, cfg: RunConfig):
    report = mcc(ds.z, recovered)
    det = detect_thresholds(recovered, cfg.kernel_config(), cfg.eval.min_prominence, cfg.eval.edge_fraction)
    thresholds = quantized_agreement(ds.z, ds.spec, recovered, det) if ds.spec is not None else det
    return report, thresholds


def run_seed(base: RunConfig, seed: int) -> tuple[SeedOutcome, Dataset, TrainResult]:
    cfg = seeded_config(base, seed)
    ds = dataset_for(cfg)
    result = train(ds.x, cfg.encoder_spec(ds.x.shape[1]), cfg.train_config())
    recovered = encode_numpy(result.params, ds.x)
    report, thr = evaluate(ds, recovered, cfg)
    outcome = SeedOutcome(
        seed=seed,
        mcc=report.mcc,
        agreement=float(thr.agreement),
        detected_counts=sorted(len(t) for t in thr.thresholds),
        true_counts=sorted(len(t) for t in ds.spec.thresholds),
        counts_match=bool(thr.counts_match),
        initial_loss=result.history[0].total if result.history else float("nan"),
        final_loss=result.history[-1].total if result.history else float("nan"),
    )
    return outcome, ds, result


def summarize(outcomes: list[SeedOutcome]) -> dict:
    scores = np.array([o.mcc for o in outcomes])
    n = len(scores)
    se = float(scores.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {
        "seeds": [o.seed for o in outcomes],
        "mcc": scores.tolist(),
        "mcc_mean": float(scores.mean()),
        "mcc_std": float(scores.std(ddof=1)) if n > 1 else 0.0,
        "mcc_stderr": se,
        "counts_match": [o.counts_match for o in outcomes],
        "agreement": [o.agreement for o in outcomes],
    }
