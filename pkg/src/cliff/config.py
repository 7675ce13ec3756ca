"""Run configuration: one JSON document, validated before any compute."""

from __future__ import annotations

import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .criterion import CliffWeights
from .density import KernelConfig
from .trainer import EncoderSpec, TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    threshold_counts: list[int] = Field(default=[2, 1], min_length=1)
    n_samples: int = Field(default=5000, ge=1)
    min_jump: float = Field(default=2.0, ge=1.0)
    identity_mixing: bool = False
    mixing_scale: float = 0.5
    max_condition: float = Field(default=20.0, gt=1.0)


class KernelSection(_Strict):
    sigma: float = Field(default=0.1, gt=0)
    grid_a: float = -5.0
    grid_b: float = 5.0
    grid_k: int = Field(default=100, ge=2)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.grid_a < self.grid_b:
            raise ValueError("grid_a must be < grid_b")
        return self


class WeightsSection(_Strict):
    lambda_uni: float = Field(default=0.0, ge=0)
    lambda_biv: float = Field(default=1.0, ge=0)
    lambda_kl_uni: float = Field(default=1.0, ge=0)
    m_conditioning: int = Field(default=20, ge=1)
    divergence: Literal["jsd", "hellinger"] = "jsd"
    zeta_policy: Literal["random", "first"] = "random"
    uniform_points: Literal["grid", "random"] = "grid"

    @model_validator(mode="after")
    def _some_weight(self):
        if not (self.lambda_uni > 0 or self.lambda_biv > 0 or self.lambda_kl_uni > 0):
            raise ValueError("at least one lambda must be positive")
        return self


class EncoderSection(_Strict):
    hidden: list[int] = Field(default=[50, 100, 50])


class TrainSection(_Strict):
    learning_rate: float = Field(default=0.002, ge=0)
    batch_size: int = Field(default=5000, ge=2)
    epochs: int = Field(default=1000, ge=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)


class EvalSection(_Strict):
    min_prominence: float = Field(default=0.3, gt=0, le=1)
    edge_fraction: float = Field(default=0.1, gt=0, lt=1)
    landscape_step: float = Field(default=5.0, gt=0, le=90)


class SeedSection(_Strict):
    dataset_seed: int = 0
    init_seed: int = 0
    zeta_seed: int = 1


class RunConfig(_Strict):
    data: DataSection = DataSection()
    kernel: KernelSection = KernelSection()
    weights: WeightsSection = WeightsSection()
    encoder: EncoderSection = EncoderSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    seeds: SeedSection = SeedSection()

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(**self.kernel.model_dump())

    def cliff_weights(self) -> CliffWeights:
        return CliffWeights(kernel=self.kernel_config(), **self.weights.model_dump())

    def encoder_spec(self, input_dim: int | None = None) -> EncoderSpec:
        d = len(self.data.threshold_counts)
        return EncoderSpec((input_dim or d, *self.encoder.hidden, d))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            weights=self.cliff_weights(),
            init_seed=self.seeds.init_seed,
            zeta_seed=self.seeds.zeta_seed,
            **self.train.model_dump(),
        )

    def with_seeds(self, **seeds) -> "RunConfig":
        return self.model_copy(update={"seeds": self.seeds.model_copy(update=seeds)})


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return RunConfig.model_validate(json.load(fh))


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(), indent=2, sort_keys=True) + "\n"
