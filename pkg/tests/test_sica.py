import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canopy_uq.grid import RasterGrid
from canopy_uq.sica import (
    CompositeParams,
    Observation,
    ObservationStack,
    composite,
    landsat_qa_predicate,
    masked_median,
    validity_mask,
)

ND = -9999.0


def img(values, nodata=ND):
    return RasterGrid(np.asarray(values, dtype=np.float64).reshape(1, -1, 1), nodata=nodata)


def stacks(by_year):
    return {y: ObservationStack([Observation(img(v), y) for v in vals]) for y, vals in by_year.items()}


def test_single_year_median():
    out = composite(stacks({2020: [[1, 2, 3], [5, 6, 7], [3, 4, 5]]}), CompositeParams(2020))
    np.testing.assert_array_equal(out.data[0, :, 0], [3, 4, 5])


def test_fallback_fills_gap_from_previous_year():
    src = stacks({2020: [[1.0, ND]], 2019: [[9.0, 4.0]]})
    out = composite(src, CompositeParams(2020, min_obs=1, lookback=1))
    np.testing.assert_array_equal(out.data[0, :, 0], [1.0, 4.0])


def test_lookback_zero_never_falls_back():
    src = stacks({2020: [[1.0, ND]], 2019: [[9.0, 4.0]]})
    out = composite(src, CompositeParams(2020, lookback=0))
    assert out.data[0, 1, 0] == ND


def test_even_count_averages_middle():
    out = composite(stacks({2020: [[1.0], [2.0], [10.0], [20.0]]}), CompositeParams(2020))
    assert out.data[0, 0, 0] == 6.0


def test_years_beyond_window_ignored_and_empty_is_nodata():
    src = stacks({2017: [[5.0]], 2020: [[ND]]})
    out = composite(src, CompositeParams(2020, lookback=2))
    assert out.data[0, 0, 0] == ND


def test_empty_everywhere_with_template():
    t = img([0.0, 0.0])
    out = composite({}, CompositeParams(2020), template=t)
    assert np.all(out.data == ND)
    with pytest.raises(ValueError):
        composite({}, CompositeParams(2020))


def test_season_and_sensor_filtering():
    src = {2020: ObservationStack([
        Observation(img([1.0]), 2020, "summer", "optical"),
        Observation(img([50.0]), 2020, "winter", "optical"),
        Observation(img([70.0]), 2020, "summer", "sar"),
    ])}
    assert composite(src, CompositeParams(2020)).data[0, 0, 0] == 1.0
    assert composite(src, CompositeParams(2020, season="winter")).data[0, 0, 0] == 50.0
    assert composite(src, CompositeParams(2020, sensor="sar")).data[0, 0, 0] == 70.0


def test_callable_source():
    data = stacks({2020: [[ND]], 2019: [[3.0]]})
    out = composite(lambda y: data.get(y), CompositeParams(2020))
    assert out.data[0, 0, 0] == 3.0


def test_qa_bits():
    qa = np.array([0, 1 << 1, 1 << 3, 1 << 5, 1 << 0, 1 << 6])
    np.testing.assert_array_equal(landsat_qa_predicate(qa, "summer"), [1, 0, 0, 0, 1, 1])
    np.testing.assert_array_equal(landsat_qa_predicate(qa, "winter"), [1, 0, 0, 1, 1, 1])


def test_qa_channel_masks_and_is_dropped():
    data = np.array([[[10.0, 0], [20.0, 1 << 3]]])
    r = RasterGrid(data)
    m = validity_mask(r, "optical", "summer", qa_channel=1)
    np.testing.assert_array_equal(m, [[True, False]])
    out = composite({2020: ObservationStack([Observation(r, 2020)])}, CompositeParams(2020, qa_channel=1))
    assert out.channels == 1
    assert out.data[0, 0, 0] == 10.0 and out.data[0, 1, 0] == ND


def test_stack_rejects_mixed_geometry():
    with pytest.raises(ValueError):
        ObservationStack([Observation(img([1.0]), 2020), Observation(img([1.0, 2.0]), 2020)])


def test_params_validation():
    with pytest.raises(ValueError):
        CompositeParams(2020, min_obs=0)
    with pytest.raises(ValueError):
        CompositeParams(2020, season="spring")


def brute_force(by_year, target, n_min, lookback, width):
    """Pixel-by-pixel reference: walk back year by year until the count reaches n_min."""
    out = np.full(width, ND)
    for px in range(width):
        taken = []
        for k in range(lookback + 1):
            if len(taken) >= n_min:
                break
            for v in by_year.get(target - k, []):
                if v[px] != ND:
                    taken.append(v[px])
        if taken:
            out[px] = float(np.median(taken))
    return out


@settings(max_examples=80, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(0, 3),
    st.dictionaries(
        st.integers(2016, 2020),
        st.lists(st.lists(st.sampled_from([ND, 0.5, 1.0, 2.0, 7.25, 30.0]), min_size=5, max_size=5), max_size=4),
        max_size=5,
    ),
)
def test_matches_brute_force_cutoff(n_min, lookback, by_year):
    out = composite(stacks(by_year), CompositeParams(2020, min_obs=n_min, lookback=lookback), template=img([0.0] * 5))
    expected = brute_force(by_year, 2020, n_min, lookback, 5)
    assert out.data[0, :, 0].tobytes() == expected.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1, max_size=7))
def test_median_bounds(vals):
    v = np.array(vals)[:, None, :]  # (K, 1, 3)
    acc = np.ones(v.shape, bool)
    med, n = masked_median(v, acc)
    assert np.all(n == len(vals))
    assert np.all(med >= v.min(axis=0) - 1e-12) and np.all(med <= v.max(axis=0) + 1e-12)
    np.testing.assert_allclose(med, np.median(v, axis=0))

