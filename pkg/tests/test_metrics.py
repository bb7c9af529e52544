import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dosemetrics.bitmask import encode
from dosemetrics.metrics import (
    EmptyRoiError,
    cumulative_dvh,
    d_extrema,
    d_hottest_cc,
    d_mean,
    d_quantile_pct,
    evaluate_metric,
    gather_roi_doses,
    hottest_cc_rank,
    kth_largest,
    kth_largest_position,
    quantile_rank,
    v_exact,
)
from dosemetrics.template import MetricKind, MetricSpec, Bound
from dosemetrics.volumes import DoseGrid, RoiMask

from conftest import random_grid


def sort_oracle(doses, k):
    return sorted(doses, reverse=True)[k - 1]


def count_oracle(doses, threshold):
    return sum(1 for d in doses if d >= threshold) / len(doses)


def test_quantile_example_40pct_of_five():
    doses = np.array([10.0, 20.0, 30.0, 40.0, 50.0])
    assert quantile_rank(40, 5) == 2
    assert d_quantile_pct(doses, 40) == 40.0


def test_quantile_100pct_is_min():
    doses = np.array([3.0, 9.0, 1.0, 7.0])
    assert d_quantile_pct(doses, 100) == 1.0


def test_quantile_constant_volume():
    doses = np.full(17, 60.0)
    for x in (1, 25, 50, 99, 100):
        assert d_quantile_pct(doses, x) == 60.0


def test_hottest_cc_example():
    doses = np.array([10.0, 20.0, 30.0, 40.0, 50.0])
    k, clamped = hottest_cc_rank(0.03, 0.008, 5)
    assert (k, clamped) == (4, False)
    value, clamped = d_hottest_cc(doses, 0.03, 0.008)
    assert (value, clamped) == (20.0, False)


def test_hottest_cc_small_volume_is_max():
    doses = np.array([10.0, 50.0, 30.0])
    value, clamped = d_hottest_cc(doses, 0.004, 0.008)
    assert (value, clamped) == (50.0, False)


def test_hottest_cc_clamps_to_min():
    doses = np.array([10.0, 50.0, 30.0])
    value, clamped = d_hottest_cc(doses, 10 * 3 * 0.008, 0.008)
    assert (value, clamped) == (10.0, True)


def test_extrema_and_mean():
    doses = np.array([10.0, 20.0, 30.0])
    assert d_extrema(doses) == (30.0, 10.0)
    assert d_mean(doses) == 20.0
    assert d_extrema(np.array([42.0])) == (42.0, 42.0)
    assert d_mean(np.array([7.0])) == 7.0


def test_v_exact_counting_and_boundary():
    doses = np.array([70.0, 67.0, 66.0, 50.0])
    assert v_exact(doses, 0.95 * 70.0) == 0.5
    assert v_exact(doses, 1.0) == 1.0
    assert v_exact(doses, 100.0) == 0.0
    # a voxel exactly at the threshold counts as covered
    assert v_exact(np.array([66.5, 60.0]), 66.5) == 0.5


def test_empty_inputs_raise():
    empty = np.array([])
    for fn in (d_mean, d_extrema):
        with pytest.raises(EmptyRoiError):
            fn(empty)
    with pytest.raises(EmptyRoiError):
        d_quantile_pct(empty, 50)
    with pytest.raises(EmptyRoiError):
        v_exact(empty, 1.0)


def test_rank_validation():
    with pytest.raises(ValueError):
        quantile_rank(0, 5)
    with pytest.raises(ValueError):
        quantile_rank(101, 5)
    with pytest.raises(ValueError):
        hottest_cc_rank(-1, 0.008, 5)
    with pytest.raises(ValueError):
        hottest_cc_rank(0.03, 0.0, 5)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 400),
       x=st.floats(0.5, 100.0))
def test_quantile_matches_sort_oracle(seed, n, x):
    rng = np.random.default_rng(seed)
    doses = rng.uniform(0, 80, size=n)
    k = quantile_rank(x, n)
    assert kth_largest(doses, k) == sort_oracle(doses, k)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 400),
       t=st.floats(-5.0, 90.0))
def test_v_exact_matches_counting_oracle(seed, n, t):
    rng = np.random.default_rng(seed)
    doses = rng.uniform(0, 80, size=n)
    assert v_exact(doses, t) == count_oracle(doses, t)


def test_quantile_monotone_in_x(rng):
    doses = rng.uniform(0, 80, size=300)
    values = [d_quantile_pct(doses, x) for x in (5, 20, 50, 80, 100)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_v_exact_monotone_in_threshold(rng):
    doses = rng.uniform(0, 80, size=300)
    values = [v_exact(doses, t) for t in (0, 10, 40, 70, 85)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_bounds_min_mean_max(rng):
    doses = rng.uniform(0, 80, size=500)
    dmax, dmin = d_extrema(doses)
    assert dmin <= d_mean(doses) <= dmax


def test_tie_selection_smallest_position():
    doses = np.array([50.0, 70.0, 70.0, 10.0])
    assert kth_largest(doses, 1) == 70.0
    assert kth_largest_position(doses, 1) == 1
    assert kth_largest_position(doses, 2) == 1  # tie at the selected value


def test_cumulative_dvh_properties(rng):
    doses = rng.uniform(0, 60, size=200)
    thresholds, fractions = cumulative_dvh(doses, bin_width=1.0, max_dose=70.0)
    assert thresholds[0] == 0.0
    assert fractions[0] == 1.0
    assert np.all(np.diff(fractions) <= 0)
    for t, f in zip(thresholds[::7], fractions[::7]):
        assert f == v_exact(doses, t)


def test_cumulative_dvh_constant_steps_at_dose():
    doses = np.full(10, 60.0)
    thresholds, fractions = cumulative_dvh(doses, bin_width=1.0, max_dose=70.0)
    assert fractions[60] == 1.0  # covered exactly at 60 Gy
    assert fractions[61] == 0.0


def grid_and_mask(rng, dims=(6, 6, 6), density=0.4, unit_scale=1.0):
    g = random_grid(rng, dims=dims, unit_scale=unit_scale)
    nx, ny, nz = dims
    occ = rng.random((nz, ny, nx)) < density
    occ[0, 0, 0] = True  # never empty
    return g, RoiMask("roi", dims, occ)


def test_gather_matches_boolean_filter(rng):
    g, mask = grid_and_mask(rng)
    gathered = gather_roi_doses(g, mask)
    brute = [g.values[z, y, x]
             for z in range(6) for y in range(6) for x in range(6)
             if mask.occupancy[z, y, x]]
    assert np.array_equal(gathered, np.array(brute))


def test_gather_full_and_single_voxel(rng):
    g = random_grid(rng, dims=(4, 4, 4))
    full = RoiMask("all", (4, 4, 4), np.ones((4, 4, 4), dtype=bool))
    assert np.array_equal(gather_roi_doses(g, full), g.values.ravel())
    occ = np.zeros((4, 4, 4), dtype=bool)
    occ[1, 2, 3] = True
    single = RoiMask("one", (4, 4, 4), occ)
    assert gather_roi_doses(g, single)[0] == g.values[1, 2, 3]


def test_gather_empty_roi_raises(rng):
    g = random_grid(rng, dims=(4, 4, 4))
    empty = RoiMask("none", (4, 4, 4), np.zeros((4, 4, 4), dtype=bool))
    with pytest.raises(EmptyRoiError, match="'none' is empty"):
        gather_roi_doses(g, empty)


def test_gather_from_bitmask_source(rng):
    g, mask = grid_and_mask(rng)
    packed = encode([mask])
    assert np.array_equal(gather_roi_doses(g, (packed, "roi")),
                          gather_roi_doses(g, mask))


def spec_of(kind, param=None, roi="PTV_70", roi_class="ptv", unit="pct_presc"):
    return MetricSpec(
        roi=roi, roi_class=roi_class, metric=MetricKind(kind, param),
        aim=Bound("<=", 1e9, unit if kind.startswith("D") else "pct_volume"),
    )


def test_evaluate_metric_v95_phantom(rng):
    # exactly 98% of PTV voxels at or above 66.5 Gy
    dims = (10, 10, 10)
    occ = np.zeros((10, 10, 10), dtype=bool)
    occ.ravel()[:400] = True
    vals = np.full((10, 10, 10), 30.0)
    flat = vals.ravel()
    flat[:392] = 70.0   # 392/400 = 0.98 covered
    flat[392:400] = 50.0
    g = DoseGrid(dims, (2, 2, 2), flat.reshape(10, 10, 10))
    mask = RoiMask("PTV_70", dims, occ)
    mv = evaluate_metric(g, mask, spec_of("V_pct", 95.0), {"PTV_70": 70.0})
    assert mv.value == 0.98
    assert mv.roi_voxel_count == 400


def test_evaluate_metric_dmean_constant(rng):
    g = DoseGrid((4, 4, 4), (2, 2, 2), np.full((4, 4, 4), 41.5))
    mask = RoiMask("r", (4, 4, 4), np.ones((4, 4, 4), dtype=bool))
    mv = evaluate_metric(g, mask, spec_of("D_mean", roi="r", roi_class="oar", unit="gy"), {})
    assert mv.value == 41.5


def test_evaluate_metric_dcc_fourth_largest(rng):
    g, mask = grid_and_mask(rng, dims=(8, 8, 8))
    mv = evaluate_metric(g, mask, spec_of("D_cc", 0.03, roi="r", roi_class="oar", unit="gy"), {})
    doses = gather_roi_doses(g, mask)
    assert mv.value == sort_oracle(doses, 4)  # 0.03 cc / 0.008 cc -> rank 4


def test_evaluate_metric_units_are_physical(rng):
    # same physical dose stored at two unit scales gives identical metrics
    g1, mask = grid_and_mask(rng, dims=(6, 6, 6))
    g2 = DoseGrid(g1.dims, g1.spacing_mm, g1.values / 70.0, unit_scale=70.0)
    prescriptions = {"PTV_70": 70.0}
    for kind, param in [("D_mean", None), ("D_max", None), ("D_pct", 2.0),
                        ("D_cc", 0.03), ("V_pct", 95.0), ("V_gy", 30.0)]:
        s = MetricSpec(roi="PTV_70", roi_class="ptv", metric=MetricKind(kind, param),
                       aim=Bound("<=", 1e9, "pct_volume" if kind.startswith("V") else "pct_presc"))
        v1 = evaluate_metric(g1, mask, s, prescriptions).value
        v2 = evaluate_metric(g2, mask, s, prescriptions).value
        assert v1 == pytest.approx(v2, rel=1e-12)


def test_selection_equals_full_sort_oracle_bulk(rng):
    for _ in range(25):
        n = int(rng.integers(1, 2000))
        doses = rng.uniform(0, 90, size=n)
        x = float(rng.uniform(0.5, 100))
        k = quantile_rank(x, n)
        assert kth_largest(doses, k) == sort_oracle(doses, k)
