import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microid.core import ZGrid
from microid.dgp import DgpSpec, MarketRecord, PriceRule, ShockLaw, sample_consumers, simulate_markets
from microid.errors import DisconnectedCover, NoTies
from microid.index_recovery import (IndexField, MatchedPair, PairSet, chain_and_integrate, compare_fields,
                                     find_common_ccp, find_matched_pairs, jacobian_ratio, jacobian_ratios,
                                     select_delta, tie_groups)
from microid.inversion import SurfaceStack, solve_z_star

from conftest import build


def clone(m, new_id, xi=None):
    return MarketRecord(new_id, m.x, m.p, m.w, m.xi_true if xi is None else np.asarray(xi, float))


def test_identical_markets_match_exactly():
    spec, markets, _ = build(T=1)
    ms = [markets[0], clone(markets[0], 1)]
    stack = SurfaceStack([sample_consumers(spec, m) for m in ms])
    pairs = find_matched_pairs(ms, stack, pitch=0.2)
    assert len(pairs) > 0
    assert np.max(pairs.distances) < 1e-8


def test_linear_shift_equals_shock_difference(linear_rec):
    pairs = linear_rec.pairs
    xi = {m.id: m.xi_true for m in linear_rec.markets}
    pick = np.random.default_rng(0).choice(len(pairs), 400, replace=False)
    for k in pick:
        pr = pairs[k]
        assert np.allclose(pr.z_prime - pr.z, xi[pr.t] - xi[pr.t_prime], atol=1e-5)


def test_single_market_has_no_ties():
    spec, markets, stack = build(T=1)
    with pytest.raises(NoTies):
        find_matched_pairs(markets, stack, pitch=0.2)


def test_tie_groups_tolerance_mode():
    spec, markets, _ = build(T=6)
    jittered = [MarketRecord(m.id, m.x, m.p + 1e-4 * k, m.w, m.xi_true) for k, m in enumerate(markets)]
    exact = tie_groups(markets, 0.2)
    loose = tie_groups(jittered, 0.0, tolerance=0.01)
    assert sorted(map(sorted, exact)) == sorted(map(sorted, loose))


def test_delta_is_quantile_of_converged():
    d = np.arange(100.0)
    ok = np.ones(100, dtype=bool)
    ok[-10:] = False
    assert select_delta(d, ok) == pytest.approx(np.quantile(d[:90], 0.95), rel=1e-6)


def test_matched_pairs_within_delta(linear_rec):
    assert np.all(linear_rec.pairs.distances < linear_rec.pairs.delta)


def test_ratio_same_market_is_identity(linear_rec):
    stack = linear_rec.stack
    z = np.array([0.3, -0.4])
    s = stack.surfaces[0](z)[0]
    pr = MatchedPair(stack.ids[0], stack.ids[0], None, None, s, z, z)
    assert np.allclose(jacobian_ratio(pr, stack).matrix, np.eye(2), atol=1e-12)


def test_ratio_linear_index_is_identity(linear_rec):
    r, ok = jacobian_ratios(linear_rec.pairs)
    assert ok.mean() > 0.99
    assert np.max(np.abs(r[ok] - np.eye(2))) < 1e-3


def test_ratio_quadratic_matches_analytic(quad_rec):
    pairs = quad_rec.pairs
    g = quad_rec.spec.index
    r, ok = jacobian_ratios(pairs)
    want = np.linalg.solve(g.jacobian(pairs.z_prime), g.jacobian(pairs.z))
    assert np.max(np.abs(r[ok] - want[ok])) < 1e-2


def test_linear_index_recovered(linear_rec):
    fld = linear_rec.field
    pts = fld.grid.points()[fld.coverage]
    assert fld.coverage_fraction > 0.8
    assert np.max(np.abs(fld.values[fld.coverage] - pts)) < 1e-3


def test_quadratic_index_recovered(quad_rec):
    assert quad_rec.field.error_vs(quad_rec.spec.index) <= 5e-2


def test_two_spanning_trees_agree(quad_rec):
    other = chain_and_integrate(quad_rec.pairs, quad_rec.spec.grid, seed=1)
    assert compare_fields(quad_rec.field, other) <= 1e-2


@pytest.mark.parametrize("which", ["linear_rec", "quad_rec"])
def test_anchor_normalization(which, request):
    fld = request.getfixturevalue(which).field
    a = fld.grid.anchor_flat
    assert fld.coverage[a]
    assert np.array_equal(fld.values[a], np.zeros(2))
    assert np.array_equal(fld.jacobians[a], np.eye(2))
    assert np.allclose(fld.evaluate(fld.z0), 0.0, atol=1e-14)


def test_empty_pairs_disconnected():
    grid = ZGrid.around([0, 0], 1.0, 11)
    with pytest.raises(DisconnectedCover):
        chain_and_integrate(PairSet.from_pairs([]), grid)


def test_disjoint_clusters_cover_anchor_cluster_only():
    grid = ZGrid.around([0, 0], 1.0, 11)
    nodes = grid.points()
    s = np.array([0.2, 0.2])

    def edges(mask):
        # spanning tree of the masked nodes: walk each row then link rows
        out = []
        idx = np.flatnonzero(mask)
        pts = nodes[idx]
        for a, b in zip(pts[:-1], pts[1:]):
            out.append(MatchedPair(0, 1, None, None, s, a, b))
        return out

    left = nodes[:, 0] <= 1e-9
    right = nodes[:, 0] >= 0.6 - 1e-9
    pairs = PairSet.from_pairs(edges(left) + edges(right))
    fld = chain_and_integrate(pairs, grid, min_coverage=0.1)
    assert np.array_equal(fld.coverage, left)
    assert np.allclose(fld.values[fld.coverage], nodes[left], atol=1e-12)


def test_field_save_load(tmp_path, linear_rec):
    fld = linear_rec.field
    for name in ("f.npz", "f.json"):
        fld.save(tmp_path / name)
        back = IndexField.load(tmp_path / name)
        assert np.array_equal(back.coverage, fld.coverage)
        assert np.allclose(back.values[back.coverage], fld.values[fld.coverage])
        q = np.array([[0.5, -0.3], [1.1, 0.9]])
        assert np.allclose(back.evaluate(q), fld.evaluate(q), atol=1e-12)
    json.loads((tmp_path / "f.json").read_text())


def test_ccp_identical_markets_hold():
    spec, markets, _ = build(T=1)
    ms = [clone(markets[0], k) for k in range(5)]
    stack = SurfaceStack([sample_consumers(spec, m) for m in ms])
    cert = find_common_ccp(stack)
    assert cert.verdict == "holds" and cert.witness is None


def test_ccp_wide_grid_holds(linear_rec):
    cert = find_common_ccp(linear_rec.stack)
    assert cert.holds
    assert np.max(cert.residuals) <= cert.tolerance


def test_ccp_narrow_grid_fails_with_witness():
    spec = DgpSpec(T=40, grid=ZGrid.around([0, 0], 0.3, 21), demand=dict(alpha_nu=0.3),
                   shocks=ShockLaw(radius=1.5), price=PriceRule(c_w=0.3, c_xi=0.5, pitch=0.2))
    markets = simulate_markets(spec)
    stack = SurfaceStack([sample_consumers(spec, m) for m in markets])
    cert = find_common_ccp(stack)
    assert cert.verdict == "fails"
    assert cert.witness in [m.id for m in markets]
    assert cert.residuals[cert.market_ids.index(cert.witness)] == np.max(cert.residuals)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_certificate_soundness(linear_rec, seed):
    rng = np.random.default_rng(seed)
    sub = sorted(rng.choice(len(linear_rec.stack), 12, replace=False).tolist())
    stack = SurfaceStack([linear_rec.stack.surfaces[k] for k in sub])
    cert = find_common_ccp(stack, seed=seed % 7)
    if cert.holds:
        for surf in stack.surfaces:
            res = solve_z_star(surf, cert.s_star, check_unique=False)
            assert res.residual <= cert.tolerance
