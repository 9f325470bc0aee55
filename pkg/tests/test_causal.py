import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microid.causal import (TIMING_NODES, CausalDag, audit_instrument, builtin_figures, ci_gap, d_separated,
                            fit_phi, golden_table, joint_table, load_dag, oracle_check, parse_dag, parse_query,
                            random_cpts, random_dag, timing_instrument)
from microid.errors import MissingRole, OverlappingSets, ParseError, SeriesTooShort


def dag(edges, bidirected=(), **roles):
    return CausalDag({"W": "W", "Xi": "Xi", "X": "X", **roles}, edges, bidirected)


def test_chain_blocked_by_conditioning():
    g = dag([("W", "X"), ("X", "Xi")])
    assert not d_separated(g, "W", "Xi").holds
    assert d_separated(g, "W", "Xi", "X").holds


def test_collider_opens_on_conditioning():
    g = dag([("Xi", "X"), ("W", "X")])
    assert d_separated(g, "W", "Xi").holds
    v = d_separated(g, "W", "Xi", "X")
    assert v.verdict == "fails"
    assert v.path_string() == "W -> X <- Xi"
    assert [k for _, k in v.witness] == ["end", "collider", "end"]


def test_descendant_of_collider_opens():
    g = dag([("Xi", "X"), ("W", "X"), ("X", "P")], P="P")
    assert not d_separated(g, "W", "Xi", "P").holds


def test_audit_examples():
    assert audit_instrument(dag([("Xi", "X")])).holds
    assert audit_instrument(dag([("V", "Xi"), ("V", "X")], V="V")).holds
    v = audit_instrument(dag([("Xi", "X"), ("L", "X"), ("L", "W")], L="L"))
    assert not v.holds
    assert v.path_string() == "W <- L -> X <- Xi"


def test_bidirected_edge_is_latent_parent():
    g = dag([("Xi", "X")], bidirected=[("W", "Xi")])
    assert "U[W~Xi]" in g.nodes
    assert not audit_instrument(g).holds


def test_builtin_figures_catalogue():
    figs = builtin_figures()
    assert len(figs) == 13
    assert len({f["name"] for f in figs}) == 13
    assert sum(not f["expected"] for f in figs) == 4


def test_golden_table_matches_every_figure():
    rows = golden_table()
    bad = [(r["name"], r["computed"], r["witness"]) for r in rows if not r["match"]]
    assert not bad, f"figures whose computed verdict differs from the expected one: {bad}"


@pytest.mark.parametrize("name", ["collider", "simultaneity", "lag-collider", "proxy-collider"])
def test_failing_figures_have_collider_witness(name):
    f = {r["name"]: r for r in builtin_figures()}[name]
    v = audit_instrument(f["dag"])
    assert not v.holds
    assert ("X", "collider") in v.witness


def test_timing_verdicts():
    rng = np.random.default_rng(0)
    m_prev = rng.normal(size=(400, 2))
    w = rng.normal(scale=0.3, size=(400, 2))
    m = 0.2 + 0.7 * m_prev + w
    res = timing_instrument(np.stack([m_prev, m], axis=1))
    assert res.verdicts["W^t"].holds
    assert not res.verdicts["M^t"].holds
    assert not res.verdicts["M^t-1"].holds
    assert (TIMING_NODES["x"], "collider") in res.verdicts["M^t-1"].witness
    # linear transition: the residual is the innovation up to estimation noise
    assert np.max(np.abs(res.w_hat - w)) < 0.1
    assert abs(np.corrcoef(res.w_hat.ravel(), w.ravel())[0, 1]) > 0.99
    json.dumps(res.to_dict())


def test_timing_known_phi_exact():
    rng = np.random.default_rng(1)
    m_prev = rng.normal(size=50)
    w = rng.normal(size=50)
    res = timing_instrument(np.c_[m_prev, np.sin(m_prev) + w], phi=np.sin)
    assert np.allclose(res.w_hat, w, atol=1e-14)


def test_fit_phi_polynomial():
    a = np.linspace(-1, 1, 30)
    phi = fit_phi(a, 1 + a - 0.5 * a ** 2, degree=2)
    assert np.allclose(phi(a), 1 + a - 0.5 * a ** 2, atol=1e-12)


def test_timing_series_too_short():
    with pytest.raises(SeriesTooShort):
        timing_instrument(np.zeros((10, 1)))
    with pytest.raises(SeriesTooShort):
        timing_instrument(np.zeros(10))


def test_ci_gap_independent_and_dependent():
    rng = np.random.default_rng(3)
    g = CausalDag({"a": "other", "b": "other", "c": "other"}, [("a", "c"), ("b", "c")])
    P, nodes = joint_table(g, random_cpts(g, rng))
    assert P.sum() == pytest.approx(1.0, abs=1e-14)
    assert ci_gap(P, nodes, ("a",), ("b",)) < 1e-14
    assert ci_gap(P, nodes, ("a",), ("b",), ("c",)) > 1e-6


def test_oracle_agreement():
    res = oracle_check(200, seed=0)
    assert res["soundness"] == 1.0
    assert res["faithfulness"] >= 0.95
    assert res["separated"] > 0 and res["connected"] > 0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(3, 7))
def test_dsep_symmetric(seed, n):
    rng = np.random.default_rng(seed)
    g = random_dag(n, rng)
    names = list(g.nodes)
    a, b = rng.choice(n, 2, replace=False)
    C = [names[i] for i in range(n) if i not in (a, b) and rng.random() < 0.5]
    fwd = d_separated(g, names[a], names[b], C)
    back = d_separated(g, names[b], names[a], C)
    assert fwd.holds == back.holds
    if not fwd.holds:
        assert fwd.witness[0][0] == names[a] and fwd.witness[-1][0] == names[b]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_witness_is_open_trail(seed):
    rng = np.random.default_rng(seed)
    g = random_dag(6, rng, p_edge=0.5)
    names = list(g.nodes)
    a, b = rng.choice(6, 2, replace=False)
    C = {names[i] for i in range(6) if i not in (a, b) and rng.random() < 0.4}
    v = d_separated(g, names[a], names[b], C)
    if v.holds:
        return
    anc = g.ancestors(C)
    for (n, kind), left, right in zip(v.witness[1:-1], v.arrows[:-1], v.arrows[1:]):
        if kind == "collider":
            assert left == "->" and right == "<-" and n in anc
        else:
            assert n not in C


def test_parse_formats(tmp_path):
    text = """
    # proxy collider
    node W role=instrument
    node L role=latent_cost
    Xi -> X
    X <- L
    L -> W
    A <-> Xi
    """
    g = parse_dag(text)
    assert g.roles["W"] == "W" and g.roles["L"] == "L" and g.roles["Xi"] == "Xi" and g.roles["X"] == "X"
    assert ("L", "X") in g.edges
    assert g.bidirected == (("A", "Xi"),)
    assert not audit_instrument(g).holds
    p = tmp_path / "g.txt"
    p.write_text(g.to_text())
    back = load_dag(p)
    assert set(back.edges) == set(g.edges) and back.roles == g.roles


def test_parse_error_has_line_number():
    with pytest.raises(ParseError) as exc:
        parse_dag("W -> X\nXi => X\n")
    assert exc.value.line == 2
    assert "2" in str(exc.value)


def test_parse_unknown_role():
    with pytest.raises(ParseError):
        parse_dag("node Q role=banana\n")


def test_cycle_rejected():
    with pytest.raises(ValueError):
        CausalDag({"a": "other"}, [("a", "b"), ("b", "a")])
    with pytest.raises(ParseError):
        parse_dag("a -> b\nb -> a\n")


def test_duplicate_unique_role_rejected():
    with pytest.raises(ValueError):
        CausalDag({"a": "W", "b": "W"})


def test_overlapping_sets():
    g = dag([("Xi", "X"), ("W", "X")])
    with pytest.raises(OverlappingSets):
        d_separated(g, "W", "Xi", ["W"])


def test_missing_role():
    g = CausalDag({"Xi": "Xi", "X": "X"}, [("Xi", "X")])
    with pytest.raises(MissingRole):
        audit_instrument(g)


def test_parse_query():
    assert parse_query("W _||_ Xi | X") == (("W",), ("Xi",), ("X",))
    assert parse_query("a, b _||_ c") == (("a", "b"), ("c",), ())
    with pytest.raises(ParseError):
        parse_query("W Xi X")
