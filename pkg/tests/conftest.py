import numpy as np
import pytest

from microid.dgp import DgpSpec, IndexFunction, PriceRule, ShockLaw, sample_consumers, simulate_markets, spec_from_dict
from microid.index_recovery import chain_and_integrate, find_matched_pairs
from microid.inversion import SurfaceStack

QUAD = [[[0.15, 0.05], [0.05, 0.05]], [[0.05, 0.05], [0.05, 0.12]]]


def build(family="linear", T=100, seed=0, radius=0.3, **kw):
    spec = DgpSpec(T=T, seed=seed, demand=dict(alpha_nu=0.3),
                   index=IndexFunction(family, Q=QUAD if family != "linear" else None),
                   shocks=ShockLaw(radius=radius),
                   price=PriceRule(c_w=0.3, c_xi=0.5, pitch=0.2), **kw)
    markets = simulate_markets(spec)
    stack = SurfaceStack([sample_consumers(spec, m) for m in markets])
    return spec, markets, stack


class Recovery:
    def __init__(self, family):
        self.spec, self.markets, self.stack = build(family)
        self.pairs = find_matched_pairs(self.markets, self.stack, pitch=0.2)
        self.field = chain_and_integrate(self.pairs, self.spec.grid, seed=0)


@pytest.fixture(scope="session")
def linear_rec():
    return Recovery("linear")


@pytest.fixture(scope="session")
def quad_rec():
    return Recovery("quadratic")


NESTED = {
    "variant": "nested_logit", "J": 2, "T": 200,
    "grid": {"z0": [0.0], "half_width": 2.0, "n": 101},
    "index": {"family": "quadratic", "dz": 1, "A": [[1.0], [0.5]], "Q": [[[0.1]], [[-0.05]]]},
    "demand": {"theta": 0.3, "nests": [[0, 1]], "alpha": 2.0},
    "shocks": {"kind": "uniform", "radius": 0.05, "mean": 0.3},
    "instruments": {"dim": 1},
    "price": {"c_w": 0.5, "c_xi": 0.5, "pitch": 0.0, "mode": "continuous"},
}


def nested_setup(**demand):
    d = dict(NESTED)
    d["demand"] = {**NESTED["demand"], **demand}
    spec = spec_from_dict(d)
    markets = simulate_markets(spec)
    surfaces = [sample_consumers(spec, m) for m in markets]
    return spec, markets, surfaces


@pytest.fixture(scope="session")
def nested_data():
    return nested_setup()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE = {}


def record(k, ok, detail):
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[k] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
