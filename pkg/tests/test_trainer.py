import numpy as np
import pytest

from cliff import diffgraph as dg
from cliff.criterion import CliffWeights, total_loss
from cliff.synthdata import make_dataset
from cliff.trainer import (
    AdamState,
    EncoderSpec,
    NumericalAbort,
    TrainConfig,
    adam_step,
    encode,
    encode_numpy,
    init_params,
    params_from_json,
    params_to_json,
    run_seeds,
    train,
)

SMALL = EncoderSpec((2, 8, 2))


@pytest.fixture(scope="module")
def data():
    return make_dataset((2, 1), n=400, seed=1)


def test_zero_weights_give_zero_output(rng):
    params = [np.zeros_like(p) for p in init_params(EncoderSpec())]
    out = encode(params, rng.normal(size=(7, 2)))
    np.testing.assert_array_equal(out.value, 0.0)


def test_single_identity_layer(rng):
    x = rng.normal(size=(5, 3))
    out = encode([np.eye(3), np.zeros(3)], x, EncoderSpec((3, 3)))
    np.testing.assert_array_equal(out.value, x)


def test_encode_dimension_mismatch(rng):
    with pytest.raises(dg.ShapeError):
        encode(init_params(EncoderSpec()), rng.normal(size=(5, 3)), EncoderSpec())


def test_graph_and_numpy_forward_agree(rng):
    params = init_params(EncoderSpec(), seed=3)
    x = rng.normal(size=(20, 2))
    np.testing.assert_allclose(encode(params, x).value, encode_numpy(params, x), atol=1e-14)


def test_init_bounds():
    params = init_params(EncoderSpec(), seed=0)
    for W, b in zip(params[0::2], params[1::2]):
        assert np.all(np.abs(W) <= 1 / np.sqrt(W.shape[0]))
        assert np.all(b == 0)


def test_initial_encoder_nondegenerate(data):
    out = encode_numpy(init_params(EncoderSpec(), seed=0), data.x)
    assert np.all(np.isfinite(out)) and np.all(out.std(axis=0) > 1e-4)


def test_adam_first_step():
    cfg = TrainConfig(learning_rate=0.001)
    (p,), _ = adam_step([np.array([0.0])], [np.array([1.0])], AdamState.zeros_like([np.zeros(1)]), cfg)
    assert p[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert p[0] == pytest.approx(-0.000999999, abs=1e-9)


def test_adam_zero_gradient():
    params = [np.array([1.0, -2.0]), np.array([[3.0]])]
    grads = [np.zeros(2), np.zeros((1, 1))]
    new, state = adam_step(params, grads, AdamState.zeros_like(params), TrainConfig())
    for a, b in zip(new, params):
        np.testing.assert_array_equal(a, b)
    assert state.t == 1


def test_adam_rejects_nonfinite():
    with pytest.raises(NumericalAbort):
        adam_step([np.zeros(2)], [np.array([np.nan, 0.0])], AdamState.zeros_like([np.zeros(2)]), TrainConfig())


def _cfg(**kw):
    base = dict(epochs=5, batch_size=400, weights=CliffWeights(m_conditioning=5))
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_bit_reproducible(data):
    a = train(data.x, SMALL, _cfg())
    b = train(data.x, SMALL, _cfg())
    for p, q in zip(a.params, b.params):
        assert np.array_equal(p, q)
    assert [r.total for r in a.history] == [r.total for r in b.history]


def test_frozen_encoder_constant_trace(data):
    res = train(data.x, SMALL, _cfg(learning_rate=0.0, weights=CliffWeights(1, 0, 0)))
    totals = [r.total for r in res.history]
    assert len(set(totals)) == 1
    for p, q in zip(res.params, res.initial_params):
        assert np.array_equal(p, q)


def test_logged_loss_is_criterion_total(data):
    cfg = _cfg(epochs=1)
    res = train(data.x, SMALL, cfg)
    z = encode_numpy(res.initial_params, data.x)
    loss, _ = total_loss(z, cfg.weights, zeta_rows=res.zeta_rows[0])
    assert loss.item() == pytest.approx(res.history[0].total, abs=1e-10)


def test_training_lowers_loss():
    ds = make_dataset((2, 1), n=1000, seed=0)
    res = train(ds.x, EncoderSpec(), TrainConfig(epochs=60, batch_size=1000))
    assert res.history[-1].total < res.history[0].total


def test_minibatch_epochs(data):
    res = train(data.x, SMALL, _cfg(epochs=2, batch_size=100))
    assert len(res.history) == 2


def test_nan_input_aborts(data):
    x = data.x.copy()
    x[0, 0] = np.nan
    with pytest.raises(NumericalAbort) as info:
        train(x, SMALL, _cfg())
    assert info.value.last_good_epoch == -1


def test_params_json_roundtrip():
    params = init_params(EncoderSpec(), seed=2)
    back, enc = params_from_json(params_to_json(params, EncoderSpec()))
    assert enc == EncoderSpec()
    for p, q in zip(params, back):
        assert np.array_equal(p, q)


def test_params_json_shape_mismatch():
    text = params_to_json(init_params(SMALL), EncoderSpec())
    with pytest.raises(ValueError):
        params_from_json(text)


def test_run_seeds_keeps_order():
    assert run_seeds(range(6), lambda s: s * s, workers=3) == [0, 1, 4, 9, 16, 25]
