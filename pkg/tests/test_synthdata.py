import itertools
import math

import numpy as np
import pytest
from scipy.stats import kstest

from cliff.density import KernelConfig, marginal_pdf_derivative, standardize
from cliff.synthdata import (
    GridDensitySpec,
    MixingSpec,
    SpecError,
    cell_frequencies,
    make_dataset,
    mix,
    four_factor_spec,
    random_grid_spec,
    random_mixing,
    read_dataset,
    sample_latents,
    true_quantize,
    unmix,
    write_dataset,
)


def test_single_cell_is_uniform_box():
    spec = GridDensitySpec([[], []], np.ones((1, 1)))
    z = sample_latents(spec, 10_000, seed=3).values
    assert z.min() >= 0 and z.max() <= 1
    for i in range(2):
        assert kstest(z[:, i], "uniform").statistic < 0.02


def test_cell_frequencies_within_binomial_error():
    masses = np.array([[0.7, 0.1], [0.1, 0.1]])
    # these masses have unit-ratio neighbours, so the jump floor is lowered
    spec = GridDensitySpec([[0.5], [0.5]], masses, min_jump=1.0)
    n = 10_000
    freq = cell_frequencies(sample_latents(spec, n, seed=0).values, spec)
    se = np.sqrt(masses * (1 - masses) / n)
    assert np.all(np.abs(freq - masses) <= 2 * se)


def test_sampling_is_deterministic():
    spec = random_grid_spec((2, 1), seed=4)
    a = sample_latents(spec, 500, seed=9).values
    b = sample_latents(spec, 500, seed=9).values
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_latents(spec, 500, seed=10).values)


def test_min_jump_enforced():
    with pytest.raises(SpecError, match="min_jump"):
        GridDensitySpec([[0.5], [0.5]], np.array([[0.7, 0.1], [0.1, 0.1]]))


@pytest.mark.parametrize(
    "thresholds, masses",
    [
        ([[0.0]], [0.5, 0.5]),
        ([[0.6, 0.4]], [0.2, 0.6, 0.2]),
        ([[0.5]], [0.5, 0.6]),
        ([[0.5]], [1.0, 0.0]),
        ([[0.5]], [0.2, 0.3, 0.5]),
    ],
)
def test_invalid_specs_rejected(thresholds, masses):
    with pytest.raises(SpecError):
        GridDensitySpec(thresholds, np.array(masses), min_jump=1.0)


@pytest.mark.parametrize("seed", range(5))
def test_random_spec_honours_jump(seed):
    spec = random_grid_spec((2, 1), seed=seed)
    assert spec.min_adjacent_ratio() >= 2.0
    assert [len(t) for t in spec.thresholds] == [2, 1]


def test_four_factor_configuration():
    spec = four_factor_spec(seed=0)
    assert [len(t) for t in spec.thresholds] == [4, 3, 4, 3]
    assert spec.cell_masses.shape == (5, 4, 5, 4)


def test_mix_identity():
    m = MixingSpec.identity(2)
    np.testing.assert_array_equal(mix(np.zeros((1, 2)), m).values, [[0.0, 0.0]])
    np.testing.assert_allclose(mix(np.array([[2.0, 0.0]]), m).values, [[math.tanh(1.0), 0.0]])
    assert math.tanh(1.0) == pytest.approx(0.76159, abs=1e-5)


def test_mix_roundtrip_and_injective():
    ds = make_dataset((2, 1), n=2000, seed=5)
    back = unmix(ds.x, ds.mixing)
    np.testing.assert_allclose(back, ds.z, atol=1e-9)
    assert len(ds.x) == len(ds.z)
    assert len(np.unique(np.round(ds.x, 9), axis=0)) == len(np.unique(ds.z, axis=0))


def test_mix_dimension_mismatch():
    with pytest.raises(SpecError):
        mix(np.zeros((3, 3)), MixingSpec.identity(2))


def test_mixing_conditioning():
    m = random_mixing(2, seed=1)
    assert np.linalg.cond(m.A) <= 20 and np.linalg.cond(m.B) <= 20
    with pytest.raises(SpecError):
        MixingSpec(np.array([[1.0, 0.0], [0.0, 1e-3]]), np.eye(2))


def test_quantize_examples():
    one = GridDensitySpec([[0.5]], np.array([0.25, 0.75]))
    assert true_quantize(np.array([[0.3]]), one)[0, 0] == 0
    two = GridDensitySpec([[0.25, 0.75]], np.array([0.1, 0.8, 0.1]))
    assert true_quantize(np.array([[0.5]]), two)[0, 0] == 1


def test_quantize_matches_linear_scan():
    spec = GridDensitySpec([[0.3, 0.6], [0.2, 0.7]], np.full((3, 3), 1 / 9), min_jump=1.0)
    pts = np.array(list(itertools.product(np.linspace(0, 1, 41), repeat=2)))
    bins = true_quantize(pts, spec)
    for row, b in zip(pts, bins):
        for i in range(2):
            k = 0
            for t in spec.thresholds[i]:
                if row[i] > t:
                    k += 1
            assert b[i] == k


def test_quantize_rejects_outside_support():
    spec = GridDensitySpec([[0.5]], np.array([0.25, 0.75]))
    with pytest.raises(ValueError):
        true_quantize(np.array([[1.5]]), spec)


def test_marginal_cliffs_sit_on_thresholds():
    ds = make_dataset((2, 1), n=5000, seed=0, identity_mixing=True)
    sb = standardize(ds.z)
    cfg = KernelConfig()
    g = cfg.grid()
    for i, ts in enumerate(ds.spec.thresholds):
        mag = np.abs(marginal_pdf_derivative(sb, i, None, cfg).values.value)
        peaks = g[[k for k in range(1, 99) if mag[k] >= mag[k - 1] and mag[k] >= mag[k + 1]]]
        for t in ts:
            ts_std = (t - sb.means[i]) / sb.stds[i]
            assert np.min(np.abs(peaks - ts_std)) <= cfg.spacing + 1e-12


def test_dataset_file_roundtrip(tmp_path):
    ds = make_dataset((2, 1), n=100, seed=2)
    write_dataset(ds, tmp_path / "d.csv", tmp_path / "d.json")
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header == "z_1,z_2,x_1,x_2"
    back = read_dataset(tmp_path / "d.csv", tmp_path / "d.json")
    assert np.array_equal(back.z, ds.z) and np.array_equal(back.x, ds.x)
    assert back.spec.thresholds == ds.spec.thresholds
    np.testing.assert_array_equal(back.mixing.A, ds.mixing.A)
    regen = make_dataset((2, 1), n=100, seed=back.seed)
    assert np.array_equal(regen.x, ds.x)
