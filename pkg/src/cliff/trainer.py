"""MLP encoder, Adam, and the training loop minimizing the Cliff loss."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffgraph as dg
from .criterion import CliffLossReport, CliffWeights, choose_zeta_rows, total_loss

log = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    def __init__(self, message, epoch=None, last_good_epoch=None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good_epoch = last_good_epoch


@dataclass(frozen=True)
class EncoderSpec:
    layer_dims: tuple[int, ...] = (2, 50, 100, 50, 2)
    activation: str = "tanh"
    final_linear: bool = True

    def __post_init__(self):
        if len(self.layer_dims) < 2 or any(k < 1 for k in self.layer_dims):
            raise ValueError(f"invalid layer_dims {self.layer_dims}")
        if self.activation != "tanh":
            raise ValueError("only tanh activations are supported")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    batch_size: int = 5000
    epochs: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: CliffWeights = CliffWeights()
    init_seed: int = 0
    zeta_seed: int = 1
    shuffle_seed: int = 2

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


def init_params(spec: EncoderSpec, seed=0) -> list[np.ndarray]:
    """Weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases; [W0, b0, W1, b1, ...]."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def encode(params, x, spec: EncoderSpec | None = None) -> dg.Tensor:
    """Forward pass; ``params`` may hold arrays or graph tensors."""
    x = dg.as_tensor(x)
    n_layers = len(params) // 2
    if spec is not None and x.shape[1] != spec.input_dim:
        raise dg.ShapeError(f"encoder expects {spec.input_dim} inputs, got {x.shape[1]}")
    h = x
    for layer in range(n_layers):
        W, b = dg.as_tensor(params[2 * layer]), dg.as_tensor(params[2 * layer + 1])
        if h.shape[1] != W.shape[0]:
            raise dg.ShapeError(f"layer {layer}: input width {h.shape[1]} != {W.shape[0]}")
        h = h @ W + b
        last = layer == n_layers - 1
        if not (last and (spec is None or spec.final_linear)):
            h = dg.tanh(h)
    return h


def encode_numpy(params, x, spec: EncoderSpec | None = None) -> np.ndarray:
    """Plain-array forward pass, independent of the graph engine."""
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(params) // 2
    for layer in range(n_layers):
        h = h @ params[2 * layer] + params[2 * layer + 1]
        if layer < n_layers - 1 or (spec is not None and not spec.final_linear):
            h = np.tanh(h)
    return h


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update. Returns new (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state disagree in length")
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient in parameter block {k}")
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class TrainResult:
    params: list[np.ndarray]
    initial_params: list[np.ndarray]
    history: list[CliffLossReport] = field(default_factory=list)
    zeta_rows: list[np.ndarray] = field(default_factory=list)

    def metrics_rows(self):
        for epoch, r in enumerate(self.history):
            yield epoch, r.l_uni, r.l_biv, r.l_kl_uni, r.total


def loss_and_grads(params, x, weights: CliffWeights, zeta_rows, spec=None):
    leaves = [dg.Tensor(p) for p in params]
    z = encode(leaves, x, spec)
    loss, report = total_loss(z, weights, zeta_rows=zeta_rows)
    dg.backward(loss)
    return report, [leaf.grad for leaf in leaves]


def train(x, enc: EncoderSpec, cfg: TrainConfig, params=None, callback=None) -> TrainResult:
    """Minimize the Cliff loss of ``encode(params, x)`` with Adam.

    Each epoch walks the data in ``batch_size`` chunks (one chunk when the batch
    covers the dataset). The logged report per epoch is the mean over chunks,
    computed before each update.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if x.shape[1] != enc.input_dim:
        raise dg.ShapeError(f"data has {x.shape[1]} columns, encoder expects {enc.input_dim}")
    weights = cfg.weights
    if params is None:
        params = init_params(enc, cfg.init_seed)
    params = [p.copy() for p in params]
    result = TrainResult(params, [p.copy() for p in params])
    state = AdamState.zeros_like(params)
    zeta_rng = np.random.default_rng(cfg.zeta_seed)
    shuffle_rng = np.random.default_rng(cfg.shuffle_seed)
    bs = min(cfg.batch_size, n)
    full_batch = bs == n
    needs_zeta = enc.output_dim >= 2

    for epoch in range(cfg.epochs):
        order = np.arange(n) if full_batch else shuffle_rng.permutation(n)
        reports = []
        for start in range(0, n - bs + 1, bs):
            rows = order[start:start + bs]
            zeta = choose_zeta_rows(bs, weights.m_conditioning, zeta_rng, weights.zeta_policy) if needs_zeta else None
            try:
                report, grads = loss_and_grads(params, x[rows], weights, zeta, enc)
            except (FloatingPointError, ValueError) as err:
                raise NumericalAbort(f"epoch {epoch}: {err}", epoch, epoch - 1) from err
            if not np.isfinite(report.total):
                raise NumericalAbort(f"epoch {epoch}: loss is {report.total}", epoch, epoch - 1)
            try:
                params, state = adam_step(params, grads, state, cfg)
            except NumericalAbort as err:
                raise NumericalAbort(f"epoch {epoch}: {err}", epoch, epoch - 1) from err
            reports.append(report)
            if full_batch:
                result.zeta_rows.append(zeta)
        result.history.append(_mean_report(reports))
        if callback is not None:
            callback(epoch, result.history[-1])
        if epoch % 100 == 0:
            log.debug("epoch %d total %.6f", epoch, result.history[-1].total)
    result.params = params
    return result


def _mean_report(reports: list[CliffLossReport]) -> CliffLossReport:
    if len(reports) == 1:
        return reports[0]
    arr = lambda key: float(np.mean([getattr(r, key) for r in reports]))  # noqa: E731
    return CliffLossReport(
        l_uni=arr("l_uni"),
        l_biv=arr("l_biv"),
        l_kl_uni=arr("l_kl_uni"),
        total=arr("total"),
        weights=reports[0].weights,
        per_factor_entropy=np.mean([r.per_factor_entropy for r in reports], axis=0).tolist(),
        per_pair_jsd=np.mean([r.per_pair_jsd for r in reports], axis=0).tolist(),
    )


def params_to_json(params, enc: EncoderSpec, **extra) -> str:
    layers = [
        {"weight": params[2 * k].tolist(), "bias": params[2 * k + 1].tolist()}
        for k in range(len(params) // 2)
    ]
    return json.dumps({"encoder": asdict(enc), "layers": layers, **extra}, indent=1)


def params_from_json(text: str):
    data = json.loads(text)
    enc_d = data["encoder"]
    enc = EncoderSpec(tuple(enc_d["layer_dims"]), enc_d.get("activation", "tanh"), enc_d.get("final_linear", True))
    params = []
    for layer in data["layers"]:
        params.append(np.asarray(layer["weight"], dtype=np.float64))
        params.append(np.asarray(layer["bias"], dtype=np.float64))
    dims = [params[0].shape[0]] + [p.shape[1] for p in params[0::2]]
    if tuple(dims) != enc.layer_dims:
        raise ValueError(f"layer shapes {dims} disagree with encoder spec {enc.layer_dims}")
    return params, enc


def run_seeds(jobs, worker, workers: int = 1):
    """Run ``worker(job)`` for every job, preserving job order in the results."""
    if workers <= 1:
        return [worker(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, jobs))
