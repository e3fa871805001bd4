import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from canopy_uq.dataset import PatchRecord
from canopy_uq.weighting import GaussianKDE, WeightFunction, fit_kde, fit_weights, sample_targets


def _record(values):
    values = np.asarray(values, dtype=np.float32).reshape(1, -1)
    mask = np.ones(values.shape, bool)
    return PatchRecord(np.zeros(values.shape + (1,), np.float32), values, mask, 0, 0, 0, 0)


def test_single_value_dataset():
    s = sample_targets([_record([7.5])], n=100, seed=0)
    assert s.shape == (100,) and np.all(s == 7.5)


def test_sampling_respects_mask_and_errors_when_empty():
    r = _record([1.0, 2.0, 3.0])
    r.valid_mask[0, 1] = False
    s = sample_targets([r], n=1000, seed=0)
    assert set(np.unique(s)) == {1.0, 3.0}
    r.valid_mask[:] = False
    with pytest.raises(ValueError):
        sample_targets([r], n=10)


def test_subsample_without_replacement():
    s = sample_targets([_record(np.arange(100))], n=100, seed=1)
    assert sorted(s) == list(range(100))


def test_uniform_population_sample_is_flat():
    pop = np.repeat(np.arange(20, dtype=np.float64), 50)
    s = sample_targets([_record(pop)], n=20_000, seed=2)
    counts = np.bincount(s.astype(int), minlength=20)
    chi2 = ((counts - 1000) ** 2 / 1000).sum()
    assert stats.chi2.sf(chi2, df=19) > 1e-3


def test_kde_single_point_peak():
    h = 0.7
    assert fit_kde([3.0], h)(3.0)[0] == pytest.approx(1 / (h * np.sqrt(2 * np.pi)), rel=1e-14)


def test_kde_symmetry():
    k = fit_kde([-2.0, 2.0], 1.0)
    x = np.linspace(0, 5, 11)
    np.testing.assert_allclose(k(x), k(-x), rtol=1e-14)


def test_kde_standard_normal_at_zero():
    draws = np.random.default_rng(3).standard_normal(100_000)
    assert fit_kde(draws, 0.2)(0.0)[0] == pytest.approx(stats.norm.pdf(0), rel=0.05)


def test_kde_binned_path_matches_exact():
    draws = np.random.default_rng(4).gamma(2.0, 4.0, 60_000)
    binned = GaussianKDE(draws, 1.0)
    z = np.linspace(0, 40, 41)
    exact = np.array([np.mean(stats.norm.pdf((zi - draws) / 1.0)) for zi in z])
    np.testing.assert_allclose(binned(z), exact, rtol=1e-3, atol=1e-9)


def test_kde_integrates_to_one_and_is_smooth():
    draws = np.random.default_rng(5).uniform(0, 40, 2000)
    h = 1.3
    k = fit_kde(draws, h)
    z = np.linspace(-20, 60, 8001)
    d = k(z)
    assert np.all(d >= 0)
    assert np.trapezoid(d, z) == pytest.approx(1.0, abs=1e-6)
    # |d'| <= max|K'| / h^2 with max|K'| = exp(-1/2) / sqrt(2 pi)
    lip = np.exp(-0.5) / np.sqrt(2 * np.pi) / h**2
    assert np.max(np.abs(np.diff(d))) <= lip * (z[1] - z[0]) * (1 + 1e-9)


def test_bad_bandwidth():
    with pytest.raises(ValueError):
        fit_kde([1.0, 2.0], 0.0)
    with pytest.raises(ValueError):
        fit_kde([], 1.0)


def test_uniform_targets_give_unit_weights():
    # support wider than the clamp range so the density is flat on all of [0, 40]
    v = np.random.default_rng(6).uniform(-15, 55, 1_000_000)
    wf = fit_weights(v)
    w = wf(np.linspace(0, 40, 50))
    np.testing.assert_allclose(w, 1.0, rtol=0.02)


def _bimodal(seed=7):
    rng = np.random.default_rng(seed)
    return np.clip(np.concatenate([rng.normal(8, 2, 50_000), rng.normal(30, 2, 5_000)]), 0, 40)


def test_rarer_mode_weighs_more():
    wf = fit_weights(_bimodal())
    assert wf(30.0) > wf(8.0)


def test_empty_range_hits_ceiling():
    wf = fit_weights(_bimodal(), clip=(0.1, 10.0))
    assert wf(19.0) == 10.0
    assert wf(40.0) == 10.0


def test_mean_weight_is_one():
    v = _bimodal(8)
    wf = fit_weights(v)
    assert wf(v).mean() == pytest.approx(1.0, rel=1e-6)


def test_weights_clamp_out_of_range_heights():
    wf = fit_weights(_bimodal(9))
    assert wf(-5.0) == wf(0.0) and wf(55.0) == wf(40.0)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(0, 40), min_size=5, max_size=300),
    st.floats(0.3, 5.0),
)
def test_weight_order_follows_density(values, h):
    v = np.array(values)
    wf = fit_weights(v, h=h, bins=257)
    assert np.all(np.isfinite(wf.table)) and np.all(wf.table > 0)
    assert wf(v).mean() == pytest.approx(1.0, rel=1e-6)
    dens = fit_kde(v, h)(wf.grid)
    free = (wf.table > 0.1) & (wf.table < 10.0)
    d, w = dens[free], wf.table[free]
    order = np.argsort(d, kind="stable")
    # decreasing density -> non-decreasing weight, up to float rounding
    assert np.all(np.diff(w[order]) <= 1e-9 * w.max())


def test_weight_file_roundtrip(tmp_path):
    wf = fit_weights(_bimodal(10))
    p = tmp_path / "w.cuqw"
    wf.save(p)
    assert p.read_bytes()[:4] == b"CUQW"
    back = WeightFunction.load(p)
    np.testing.assert_array_equal(back.table, wf.table.astype(np.float32))
    assert (back.lo, back.hi) == (0.0, 40.0)
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(ValueError):
        WeightFunction.load(p)
