import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dosemetrics.metrics import v_exact
from dosemetrics.surrogate import (
    DEFAULT_MARGIN_GY,
    DEFAULT_TOLERANCE,
    PAPER_ALPHA,
    InfeasibleToleranceError,
    SurrogateConfig,
    alpha_min,
    error_bound,
    margin_fraction_qm,
    pointwise_error,
    select_alpha_from_cohort,
    sigmoid_indicator,
    v_approx,
)
from dosemetrics.volumes import DoseGrid

from conftest import random_grid


def cfg_of(alpha, threshold, m=DEFAULT_MARGIN_GY, eps=DEFAULT_TOLERANCE):
    return SurrogateConfig(alpha=alpha, threshold=threshold, margin_m=m, tolerance_eps=eps)


def test_sigmoid_at_zero_is_half():
    assert sigmoid_indicator(0.0, 176.0) == 0.5


def test_sigmoid_saturates_without_overflow():
    assert sigmoid_indicator(700.0 / 176.0, 176.0) == pytest.approx(1.0, abs=1e-12)
    assert sigmoid_indicator(-1e4, 1.0) == 0.0
    assert sigmoid_indicator(1e4, 1.0) == 1.0


def test_sigmoid_high_precision_value():
    # sigma(88) computed with exact exp: 1/(1+e^-88)
    assert sigmoid_indicator(0.5, 176.0) == pytest.approx(1.0, abs=1e-12)
    assert sigmoid_indicator(-0.5, 176.0) == pytest.approx(0.0, abs=1e-12)


def test_sigmoid_vector_and_scalar_agree():
    z = np.array([-2.0, 0.0, 3.0])
    vec = sigmoid_indicator(z, 2.0)
    for zi, vi in zip(z, vec):
        assert sigmoid_indicator(float(zi), 2.0) == vi


def test_v_approx_matches_exact_when_saturated():
    doses = np.array([70.0, 67.0, 66.0, 50.0])
    c = cfg_of(176.0, 66.5)
    assert v_approx(doses, c) == pytest.approx(v_exact(doses, 66.5), abs=1e-6)
    assert v_approx(doses, c) == pytest.approx(0.5, abs=1e-6)


def test_v_approx_saturation_limits():
    c = cfg_of(176.0, 10.0)
    assert v_approx(np.full(5, 60.0), c) == pytest.approx(1.0, abs=1e-12)
    assert v_approx(np.full(3, 10.0), c) == 0.5


def test_pointwise_error_at_threshold_is_half():
    c = cfg_of(9.0, 30.0)
    assert pointwise_error(np.full(7, 30.0), c) == 0.5


def test_pointwise_error_saturated_below_1e12():
    c = cfg_of(41.0, 10.0)  # |alpha * z| > 40 for |z| >= 1
    doses = np.array([8.0, 12.5, 20.0])
    assert pointwise_error(doses, c) < 1e-12


def test_pointwise_error_matches_bruteforce(rng):
    doses = rng.uniform(0, 80, size=500)
    c = cfg_of(0.7, 45.0)
    brute = np.mean([
        abs((1.0 if d >= 45.0 else 0.0) - 1 / (1 + math.exp(-0.7 * (d - 45.0))))
        for d in doses
    ])
    assert pointwise_error(doses, c) == pytest.approx(brute, rel=1e-12)


def test_margin_fraction_counts(rng):
    assert margin_fraction_qm(np.array([10.0, 80.0]), 45.0, 0.5) == 0.0
    assert margin_fraction_qm(np.full(9, 45.0), 45.0, 0.5) == 1.0
    doses = rng.uniform(0, 80, size=400)
    brute = np.mean(np.abs(doses - 45.0) <= 2.5)
    assert margin_fraction_qm(doses, 45.0, 2.5) == brute


def test_error_bound_worked_values():
    assert error_bound(math.log(100) / 0.5, 0.0, 0.5) == pytest.approx(0.01, abs=1e-15)
    assert error_bound(5.0, 1.0, 0.5) == 0.5
    assert error_bound(1e6, 0.0, 0.5) == pytest.approx(0.0, abs=1e-300)


def test_alpha_min_worked_values():
    assert alpha_min(0.0, 0.5, 0.01) == pytest.approx(9.210340371976184, abs=1e-12)
    assert alpha_min(0.01, 0.5, 0.01) == pytest.approx(10.57653406138907, abs=1e-12)


def test_alpha_min_infeasible_states_threshold():
    with pytest.raises(InfeasibleToleranceError) as err:
        alpha_min(0.02, 0.5, 0.01)
    assert err.value.min_feasible_eps == 0.01
    with pytest.raises(InfeasibleToleranceError):
        alpha_min(0.02, 0.5, 0.005)


@settings(max_examples=100, deadline=None)
@given(q=st.floats(0.0, 0.9), m=st.floats(0.05, 5.0), eps=st.floats(1e-4, 0.5))
def test_alpha_min_inversion(q, m, eps):
    if eps <= q / 2:
        return
    alpha = alpha_min(q, m, eps)
    assert error_bound(alpha, q, m) == pytest.approx(eps, abs=1e-12)


def test_alpha_min_monotonicity():
    base = alpha_min(0.005, 0.5, 0.01)
    assert alpha_min(0.012, 0.5, 0.01) > base      # increases in q_m
    assert alpha_min(0.005, 0.5, 0.02) < base      # decreases in eps
    assert alpha_min(0.005, 1.0, 0.01) < base      # decreases in margin


@settings(max_examples=120, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_surrogate_error_dominance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 500))
    doses = rng.uniform(0, 80, size=n)
    threshold = float(rng.uniform(5, 75))
    m = float(rng.uniform(0.1, 4.0))
    alpha = float(rng.uniform(0.05, 300.0))
    c = SurrogateConfig(alpha=alpha, threshold=threshold, margin_m=m)
    gap = abs(v_exact(doses, threshold) - v_approx(doses, c))
    delta = pointwise_error(doses, c)
    bound = error_bound(alpha, margin_fraction_qm(doses, threshold, m), m)
    assert gap <= delta + 1e-15
    assert delta <= bound + 1e-15


def test_convergence_to_exact_as_alpha_grows(rng):
    doses = rng.uniform(0, 80, size=300)
    threshold = 41.37  # no dose lands exactly here
    exact = v_exact(doses, threshold)
    gaps = [abs(v_approx(doses, cfg_of(a, threshold)) - exact)
            for a in (1.0, 10.0, 100.0, 1000.0)]
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-9


def test_gradient_factor_positive():
    # the per-voxel slope alpha * s * (1 - s) never vanishes for finite z
    for z in (-5.0, -0.1, 0.0, 0.2, 4.0):
        s = sigmoid_indicator(z, 3.0)
        assert 3.0 * s * (1 - s) > 0


def test_paper_constants_shipped():
    assert PAPER_ALPHA == {"PTV_54.25": 209.0, "PTV_70": 176.0}
    assert DEFAULT_MARGIN_GY == 0.5
    assert DEFAULT_TOLERANCE == 0.01


def test_select_alpha_degenerate_cohort():
    g = DoseGrid((4, 4, 4), (2, 2, 2), np.full((4, 4, 4), 70.0))
    cfg = select_alpha_from_cohort([(g, None)], threshold_gy=30.0)
    assert cfg.q_m == 0.0
    assert cfg.alpha == pytest.approx(2 * math.log(100), abs=1e-12)


def test_select_alpha_pools_across_volumes(rng):
    g1 = random_grid(rng, dims=(5, 5, 5))
    g2 = random_grid(rng, dims=(5, 5, 5))
    threshold, m, eps = 40.0, 1.5, 0.05
    cfg = select_alpha_from_cohort([(g1, None), (g2, None)], threshold,
                                   margin_m=m, eps=eps)
    pooled = np.concatenate([g1.values.ravel(), g2.values.ravel()])
    brute_qm = np.mean(np.abs(pooled - threshold) <= m)
    assert cfg.q_m == pytest.approx(brute_qm, rel=1e-12)
    assert cfg.alpha == pytest.approx(alpha_min(brute_qm, m, eps), rel=1e-12)


def test_select_alpha_respects_unit_scale(rng):
    g = random_grid(rng, dims=(5, 5, 5))
    scaled = DoseGrid(g.dims, g.spacing_mm, g.values / 70.0, unit_scale=70.0)
    a = select_alpha_from_cohort([(g, None)], 40.0, margin_m=0.3)
    b = select_alpha_from_cohort([(scaled, None)], 40.0, margin_m=0.3)
    assert a.alpha == pytest.approx(b.alpha, rel=1e-12)
