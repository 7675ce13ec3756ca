import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from cliff import diffgraph as dg
from cliff.criterion import (
    UNIFORM_ENTROPY,
    CliffWeights,
    choose_zeta_rows,
    differential_entropy,
    generalized_hellinger,
    generalized_jsd,
    jsd_pairwise,
    loss_biv,
    loss_kl_uni,
    loss_uni,
    normalized_derivative_magnitude,
    total_loss,
    uniform_points,
)
from cliff.density import DegenerateFactorError, DensityGrid, KernelConfig, StandardizedBatch, integrate, standardize
from cliff.evalkit import landscape_uni, rotate
from cliff.gradcheck import check_batch
from cliff.synthdata import make_dataset

CFG = KernelConfig()
R3 = math.sqrt(3.0)


def _grid(values, spacing=0.1):
    values = np.asarray(values, dtype=np.float64)
    return DensityGrid(np.arange(values.shape[0]) * spacing, dg.constant(values), spacing, "test")


def _sb(z):
    z = np.asarray(z, dtype=np.float64)
    return StandardizedBatch(dg.constant(z), np.zeros(z.shape[1]), np.ones(z.shape[1]))


@pytest.fixture(scope="module")
def cliff_latents():
    return make_dataset((2, 1), n=5000, seed=0).z


def test_normalized_magnitude_has_unit_mass(rng):
    s = normalized_derivative_magnitude(standardize(rng.normal(size=(200, 2))), 1)
    assert integrate(s).item() == pytest.approx(1.0, abs=1e-6)


def test_tight_cluster_gives_two_symmetric_peaks():
    s = normalized_derivative_magnitude(_sb(np.zeros((5, 1))), 0).values.value
    centre = 50  # grid point 0.0
    np.testing.assert_allclose(s[centre + 1:centre + 40], s[centre - 1:centre - 40:-1], atol=1e-12)
    assert s[centre] == 0.0
    peaks = [k for k in range(1, 99) if s[k] > s[k - 1] and s[k] > s[k + 1]]
    assert peaks == [49, 51]


def test_reflection_reflects_profile(rng):
    z = standardize(rng.normal(size=(300, 1))).values.value
    a = normalized_derivative_magnitude(_sb(z), 0).values.value
    b = normalized_derivative_magnitude(_sb(-z), 0).values.value
    # grid point k maps to -g_k, which is grid point 100 - k
    np.testing.assert_allclose(b[1:], a[:0:-1], atol=1e-9)


def test_flat_density_is_degenerate():
    with pytest.raises(DegenerateFactorError):
        normalized_derivative_magnitude(_sb(np.full((4, 1), 50.0)), 0)


def test_entropy_of_uniform():
    k = 200
    spacing = 2 * R3 / k
    h = differential_entropy(_grid(np.full(k, 1 / (2 * R3)), spacing)).item()
    assert h == pytest.approx(math.log(2 * R3), abs=1e-2)
    assert math.log(2 * R3) == pytest.approx(1.24245, abs=1e-5)


def test_entropy_of_single_cell():
    v = np.zeros(100)
    v[37] = 1 / 0.1
    assert differential_entropy(_grid(v)).item() == pytest.approx(math.log(0.1), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=100, max_size=100))
def test_entropy_bounded_by_support(raw):
    v = np.asarray(raw)
    if v.sum() < 1e-6:
        return
    v = v / (v.sum() * 0.1)
    assert differential_entropy(_grid(v)).item() <= math.log(10.0) + 1e-9


def test_loss_uni_identical_columns(rng):
    col = rng.normal(size=(300, 1))
    sb = standardize(np.hstack([col, col]))
    h1 = differential_entropy(normalized_derivative_magnitude(sb, 0)).item()
    assert loss_uni(sb).item() == pytest.approx(2 * h1, abs=1e-12)


def test_loss_uni_prefers_axis_aligned(cliff_latents):
    assert loss_uni(cliff_latents).item() < loss_uni(rotate(cliff_latents, 45.0)).item()


def test_loss_uni_sweep_minimum_on_axes(cliff_latents):
    rows = landscape_uni(cliff_latents, 5.0)
    best = rows[np.argmin(rows[:, 1]), 0]
    assert min(abs(best - 0), abs(best - 90), abs(best - 180)) <= 5.0


def test_jsd_single_profile_is_zero(rng):
    z = standardize(rng.normal(size=(100, 2)))
    assert jsd_pairwise(z, 0, 1, z.values[:1, 1]).item() == 0.0


def test_jsd_disjoint_halves():
    left = np.r_[np.full(50, 1 / 5.0), np.zeros(50)]
    profiles = _grid(np.column_stack([left, left[::-1]]))
    assert generalized_jsd(profiles).item() == pytest.approx(math.log(2), abs=1e-2)
    # each profile overlaps the half-height mixture with affinity 1/sqrt(2)
    assert generalized_hellinger(profiles).item() == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-5)


def test_jsd_independent_product_sample(rng):
    a = rng.normal(size=60)
    z = standardize(np.array([[x, y] for x in a for y in a]))
    assert jsd_pairwise(z, 0, 1, z.values[[5, 130, 2000, 3001], 1]).item() <= 1e-9
    w = CliffWeights(m_conditioning=4)
    assert loss_biv(z, CFG, w, zeta_rows=[5, 130, 2000, 3001]).item() <= 1e-9


def test_jsd_shuffled_pairing_small_vs_dependent(rng):
    # Sampling noise at finite n keeps this above zero; it must still sit far
    # below a strongly dependent pairing.
    a = rng.uniform(size=2000)
    indep = standardize(np.column_stack([a, rng.permutation(a)]))
    dep = standardize(np.column_stack([a, (a + 0.3 * (a > 0.5)) % 1.0]))
    rows = choose_zeta_rows(2000, 20, rng)
    j_indep = jsd_pairwise(indep, 0, 1, indep.values[rows, 1]).item()
    j_dep = jsd_pairwise(dep, 0, 1, dep.values[rows, 1]).item()
    assert 0 <= j_indep < 0.5 * j_dep


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["jsd", "hellinger"]))
def test_divergence_nonnegative(seed, divergence):
    r = np.random.default_rng(seed)
    z = standardize(r.normal(size=(60, 2)) @ r.normal(size=(2, 2)))
    zeta = z.values[choose_zeta_rows(60, 5, r), 1]
    assert jsd_pairwise(z, 0, 1, zeta, CFG, divergence).item() >= -1e-9


def test_kl_uniform_matches_continuous_oracle():
    n = 5000
    u = -R3 + 2 * R3 * (np.arange(n) + 0.5) / n
    x = uniform_points(100)
    p = (norm.cdf((x + R3) / 0.1) - norm.cdf((x - R3) / 0.1)) / (2 * R3)
    expected = -UNIFORM_ENTROPY - np.mean(np.log(p))
    value = loss_kl_uni(u[:, None]).item()
    assert value == pytest.approx(expected, abs=1e-6)
    assert 0 < value < 0.03


def test_kl_collapsed_factor_is_large():
    z = np.zeros((100, 1))
    assert loss_kl_uni(_sb(z)).item() > 5


def test_uniform_points_are_midpoints():
    pts = uniform_points(4)
    np.testing.assert_allclose(pts, [-0.75 * R3, -0.25 * R3, 0.25 * R3, 0.75 * R3])


def test_total_loss_weighting(rng):
    z = rng.normal(size=(200, 2))
    rows = choose_zeta_rows(200, 20, rng)
    loss, rep = total_loss(z, CliffWeights(0, 1, 1), zeta_rows=rows)
    assert loss.item() == pytest.approx(rep.l_biv + rep.l_kl_uni, abs=1e-12)
    loss, rep = total_loss(z, CliffWeights(1, 0, 0), zeta_rows=rows)
    assert loss.item() == rep.l_uni


def test_weights_validation():
    with pytest.raises(ValueError):
        CliffWeights(0, 0, 0)
    with pytest.raises(ValueError):
        CliffWeights(-1, 1, 1)
    with pytest.raises(ValueError):
        CliffWeights(divergence="kl")


def test_zeta_rows_need_enough_samples():
    with pytest.raises(ValueError):
        choose_zeta_rows(10, 20)


def test_report_json_roundtrip(rng):
    import json

    _, rep = total_loss(rng.normal(size=(50, 3)), CliffWeights(1, 1, 1, m_conditioning=5), rng=0)
    data = json.loads(rep.to_json(epoch=3))
    assert data["epoch"] == 3
    assert len(data["per_pair_jsd"]) == 3 and len(data["per_factor_entropy"]) == 3


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scale_invariance(seed, c):
    r = np.random.default_rng(seed)
    z = r.normal(size=(80, 2))
    rows = choose_zeta_rows(80, 5, r)
    w = CliffWeights(1, 1, 1, m_conditioning=5)
    _, a = total_loss(z, w, zeta_rows=rows)
    z2 = z.copy()
    z2[:, 0] *= c
    _, b = total_loss(z2, w, zeta_rows=rows)
    for key in ("l_uni", "l_biv", "l_kl_uni", "total"):
        assert abs(getattr(a, key) - getattr(b, key)) < 1e-9


def test_permutation_equivariance(rng):
    z = rng.normal(size=(120, 3)) @ rng.normal(size=(3, 3))
    rows = choose_zeta_rows(120, 5, rng)
    w = CliffWeights(1, 1, 1, m_conditioning=5)
    perm = [2, 0, 1]
    _, a = total_loss(z, w, zeta_rows=rows)
    _, b = total_loss(z[:, perm], w, zeta_rows=rows)
    np.testing.assert_allclose(b.per_factor_entropy, np.array(a.per_factor_entropy)[perm], atol=1e-12)
    pa = np.array(a.per_pair_jsd)
    np.testing.assert_allclose(b.per_pair_jsd, pa[np.ix_(perm, perm)], atol=1e-12)
    assert b.total == pytest.approx(a.total, abs=1e-10)


def test_grad_check_uni_on_100_samples():
    z = np.random.default_rng(11).normal(size=(100, 2))
    errs = check_batch(z, CliffWeights(1, 1, 1, m_conditioning=5), choose_zeta_rows(100, 5, 3))
    assert errs["l_uni"] <= 1e-4
    assert errs["l_biv"] <= 1e-4
