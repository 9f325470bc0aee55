import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microid.dgp import sample_consumers, simulate_markets, spec_from_dict
from microid.errors import DegenerateMarkets, WeakInstrument
from microid.nested_semi import (aggregate_theta, estimate_alpha, estimate_nested, estimate_theta,
                                 plug_back_error, recover_g_nested, theta_pairs)

from conftest import NESTED, nested_setup

NESTS = [[0, 1]]


def probes(grid, k=7):
    return np.linspace(grid.lower[0] + 0.2, grid.upper[0] - 0.2, k)[:, None]


@pytest.mark.parametrize("theta", [0.5, 0.0])
def test_theta_recovered(theta):
    spec, markets, surfaces = nested_setup(theta=theta)
    est, _, _ = aggregate_theta(surfaces[:30], probes(spec.grid), NESTS)
    assert est == pytest.approx(theta, abs=1e-6)


def test_identical_markets_degenerate(nested_data):
    spec, markets, surfaces = nested_data
    with pytest.raises(DegenerateMarkets):
        estimate_theta(surfaces[0], surfaces[0], spec.grid.z0, 0, NESTS)


def test_pairwise_theta_estimate(nested_data):
    spec, markets, surfaces = nested_data
    est = estimate_theta(surfaces[0], surfaces[5], np.array([0.4]), 1, NESTS)
    assert est == pytest.approx(0.3, abs=1e-6)


def test_theta_stable_across_pairs_points_goods(nested_data):
    spec, markets, surfaces = nested_data
    est, den = theta_pairs(surfaces[:40], probes(spec.grid, 9), NESTS, max_pairs=300)
    assert est.size > 100
    assert est.max() - est.min() <= 1e-4


def test_linear_index_slope():
    lin = dict(NESTED, index={"family": "linear", "dz": 1, "A": [[1.0], [1.0]]}, T=20)
    spec = spec_from_dict(lin)
    ms = simulate_markets(spec)
    surfs = [sample_consumers(spec, m) for m in ms]
    g, dis = recover_g_nested(surfs, 0.3, NESTS, spec.grid)
    z = spec.grid.points()[:, 0]
    for j in range(2):
        slope = np.polyfit(z, g[:, j], 1)[0]
        assert slope == pytest.approx(1.0, abs=1e-3)
    assert np.max(np.abs(g - z[:, None])) < 1e-3


def test_g_recovered_with_small_disagreement(nested_data):
    spec, markets, surfaces = nested_data
    g, dis = recover_g_nested(surfaces[:30], 0.3, NESTS, spec.grid)
    assert dis <= 1e-4
    truth = spec.index(spec.grid.points())
    assert np.max(np.abs(g - truth)) < 1e-3
    assert np.array_equal(g[spec.grid.anchor_flat], np.zeros(2))


def test_misspecified_theta_detected(nested_data):
    spec, markets, surfaces = nested_data
    _, good = recover_g_nested(surfaces[:30], 0.3, NESTS, spec.grid)
    _, bad = recover_g_nested(surfaces[:30], 0.4, NESTS, spec.grid)
    assert bad > 1e-4 and bad > 100 * good


def test_alpha_and_intercept(nested_data):
    spec, markets, surfaces = nested_data
    alpha, icpt, xi_hat, t = estimate_alpha(markets, surfaces, 0.0, 0.3, NESTS)
    assert alpha == pytest.approx(2.0, abs=1e-2)
    assert np.allclose(icpt, 0.3, atol=2e-2)
    assert t > 4


def test_constant_instrument_weak(nested_data):
    spec, markets, surfaces = nested_data
    with pytest.raises(WeakInstrument):
        estimate_alpha(markets, surfaces, 0.0, 0.3, NESTS, w=np.ones(len(markets)))


def test_full_estimate_plugs_back(nested_data):
    spec, markets, surfaces = nested_data
    est = estimate_nested(markets, surfaces, NESTS, max_markets=40)
    assert est.theta == pytest.approx(0.3, abs=1e-6)
    assert est.alpha == pytest.approx(2.0, abs=1e-2)
    assert plug_back_error(est, markets, surfaces) <= 1e-3


@settings(max_examples=15, deadline=None)
@given(z=st.floats(-1.7, 1.7), a=st.integers(0, 199), b=st.integers(0, 199), j=st.sampled_from([0, 1]))
def test_theta_invariance_property(nested_data, z, a, b, j):
    spec, markets, surfaces = nested_data
    if a == b:
        return
    try:
        est = estimate_theta(surfaces[a], surfaces[b], np.array([z]), j, NESTS)
    except DegenerateMarkets:
        return
    assert est == pytest.approx(0.3, abs=1e-4)
