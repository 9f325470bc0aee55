"""Synthetic market populations with known ground truth.

A DGP draws per-market demand shocks, cost shifters and market observables,
prices the markets with a reduced-form rule snapped to a lattice, and then
evaluates exact population choice probabilities (or micro samples of
consumers) on a grid of consumer observables.

Indices follow gamma_j = g_j(z) + eta_j(x) + xi_j. Demand systems take the
index together with (y, p, x).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from typing import Iterator, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .core import SimplexPoint, ZGrid
from .errors import BadRho, ConfigInvalid, UnsupportedVariant

VARIANTS = ("mixed_logit", "nested_logit", "mixed_ces")
N_QUAD = 32


def _quadrature(n=N_QUAD):
    nodes, weights = hermegauss(n)
    return nodes, weights / weights.sum()


def _mat(a, shape, name):
    """Broadcast a scalar/list config entry to a float matrix of ``shape``."""
    a = np.asarray(0.0 if a is None else a, dtype=float)
    if a.ndim == 0 and len(shape) == 2 and shape[0] == shape[1]:
        a = a * np.eye(shape[0])
    elif a.ndim == 1 and len(shape) == 2 and a.size == shape[0] and shape[0] == shape[1]:
        a = np.diag(a)
    try:
        return np.broadcast_to(a, shape).astype(float)
    except ValueError as exc:
        raise ConfigInvalid(f"{name}: expected shape {shape}, got {a.shape}") from exc


# -- index function --------------------------------------------------------

@dataclass
class IndexFunction:
    """g(z) = A T(u) + Q[T(u), T(u)] / 2 + offset, with u = z - z0.

    ``family`` picks T: identity for "linear" and "quadratic", and the
    saturating warp T(u) = c tanh(u / c) for "sigmoid". ``Q`` has shape
    (J, dz, dz) and is ignored by the linear family.
    """

    family: str = "linear"
    J: int = 2
    dz: int = 2
    z0: np.ndarray = None
    A: np.ndarray = None
    Q: np.ndarray = None
    scale: float = 2.0
    offset: np.ndarray = None

    def __post_init__(self):
        if self.family not in ("linear", "quadratic", "sigmoid"):
            raise ConfigInvalid(f"index.family: unknown family {self.family!r}")
        self.z0 = np.zeros(self.dz) if self.z0 is None else np.broadcast_to(
            np.asarray(self.z0, dtype=float), (self.dz,)).copy()
        if self.A is None:
            self.A = np.eye(self.J, self.dz) if self.J == self.dz else np.ones((self.J, self.dz))
        self.A = _mat(self.A, (self.J, self.dz), "index.A")
        q = np.zeros((self.J, self.dz, self.dz)) if self.Q is None else np.asarray(self.Q, dtype=float)
        if q.shape != (self.J, self.dz, self.dz):
            raise ConfigInvalid(f"index.Q: expected shape {(self.J, self.dz, self.dz)}, got {q.shape}")
        self.Q = 0.5 * (q + np.swapaxes(q, 1, 2))
        if self.family == "linear":
            self.Q = np.zeros_like(self.Q)
        self.offset = np.zeros(self.J) if self.offset is None else np.broadcast_to(
            np.asarray(self.offset, dtype=float), (self.J,)).copy()
        if self.scale <= 0:
            raise ConfigInvalid("index.scale must be positive")

    def _warp(self, u):
        if self.family == "sigmoid":
            c = self.scale
            return c * np.tanh(u / c), 1.0 / np.cosh(u / c) ** 2
        return u, np.ones_like(u)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        t, _ = self._warp(z - self.z0)
        lin = np.einsum("ja,...a->...j", self.A, t)
        quad = 0.5 * np.einsum("jab,...a,...b->...j", self.Q, t, t)
        return lin + quad + self.offset

    def jacobian(self, z) -> np.ndarray:
        """dg/dz with shape (..., J, dz)."""
        z = np.asarray(z, dtype=float)
        t, dt = self._warp(z - self.z0)
        dgdt = self.A + np.einsum("jab,...b->...ja", self.Q, t)
        return dgdt * dt[..., None, :]

    def inverse(self, gamma, grid: ZGrid = None, tol=1e-12, max_iter=100) -> np.ndarray:
        """Newton inverse of g for square index maps (dz == J)."""
        gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        z = np.broadcast_to(self.z0, gamma.shape).copy()
        z = z + np.linalg.solve(self.A, (gamma - self.offset).T).T
        for _ in range(max_iter):
            r = self(z) - gamma
            if np.max(np.abs(r)) < tol:
                break
            step = np.linalg.solve(self.jacobian(z), r[..., None])[..., 0]
            z = z - step
        return z

    def is_normalized(self, atol=1e-12) -> bool:
        return bool(np.allclose(self(self.z0), self.offset, atol=atol)
                    and (self.dz != self.J or np.allclose(self.A, np.eye(self.J), atol=atol)))

    def injective_on(self, grid: ZGrid) -> bool:
        """Sufficient check: the symmetric part of Dg is positive definite on
        every grid node (a P-matrix condition over a convex box)."""
        if self.dz != self.J:
            return self.J == 1 or self.dz == 1 and bool(np.all(self.jacobian(grid.points())[..., 0] > 0))
        jac = self.jacobian(grid.points())
        sym = 0.5 * (jac + np.swapaxes(jac, -1, -2))
        return bool(np.all(np.linalg.eigvalsh(sym)[..., 0] > 0))

    def to_dict(self) -> dict:
        return {"family": self.family, "J": self.J, "dz": self.dz, "z0": self.z0.tolist(),
                "A": self.A.tolist(), "Q": self.Q.tolist(), "scale": self.scale,
                "offset": self.offset.tolist()}


# -- demand systems ----------------------------------------------------------

def logit_shares(v) -> np.ndarray:
    """Inside-good logit shares with the outside utility fixed at zero."""
    v = np.asarray(v, dtype=float)
    m = np.maximum(np.max(v, axis=-1, keepdims=True), 0.0)
    e = np.exp(v - m)
    return e / (np.exp(-m) + e.sum(axis=-1, keepdims=True))


class MixedLogitDemand:
    """Random-coefficient logit; ln(alpha_i) = a0 + a_y y + a_nu nu_i with
    nu standard normal, integrated by Gauss-Hermite quadrature.
    """

    discrete = True

    def __init__(self, alpha0=0.0, alpha_y=0.0, alpha_nu=0.0, b_x=None, n_nodes=N_QUAD):
        self.alpha0 = float(alpha0)
        self.alpha_y = float(alpha_y)
        self.alpha_nu = float(alpha_nu)
        self.b_x = None if b_x is None else np.atleast_2d(np.asarray(b_x, dtype=float))
        if self.alpha_nu == 0.0:
            self.nodes, self.weights = np.zeros(1), np.ones(1)
        else:
            self.nodes, self.weights = _quadrature(n_nodes)

    def alphas(self, y=0.0) -> np.ndarray:
        return np.exp(self.alpha0 + self.alpha_y * y + self.alpha_nu * self.nodes)

    def _shift(self, p, x, y):
        p = np.asarray(p, dtype=float)
        base = 0.0 if self.b_x is None or x is None else self.b_x @ np.atleast_1d(x)
        return base - self.alphas(y)[:, None] * p[None, :]

    def shares(self, gamma, p, x=None, y=0.0) -> np.ndarray:
        gamma = np.asarray(gamma, dtype=float)
        shift = self._shift(p, x, y)
        out = np.zeros_like(gamma)
        for w, sh in zip(self.weights, shift):
            out += w * logit_shares(gamma + sh)
        return out

    def jacobian(self, gamma, p, x=None, y=0.0) -> np.ndarray:
        """d sigma / d gamma, shape (..., J, J)."""
        gamma = np.asarray(gamma, dtype=float)
        J = gamma.shape[-1]
        out = np.zeros(gamma.shape + (J,))
        for w, sh in zip(self.weights, self._shift(p, x, y)):
            s = logit_shares(gamma + sh)
            out += w * (np.einsum("...j,jk->...jk", s, np.eye(J)) - s[..., :, None] * s[..., None, :])
        return out

    def to_dict(self) -> dict:
        return {"alpha0": self.alpha0, "alpha_y": self.alpha_y, "alpha_nu": self.alpha_nu,
                "b_x": None if self.b_x is None else self.b_x.tolist()}


class NestedLogitDemand:
    """One-level nested logit with nesting parameter theta in [0, 1).

    Mean utility delta = gamma - alpha p (+ b_x x). Goods not listed in any
    nest form singleton nests. ``nests`` uses 0-based inside-good indices.
    """

    discrete = True

    def __init__(self, theta=0.0, nests=None, J=2, alpha=1.0, b_x=None):
        if not 0.0 <= theta < 1.0:
            raise ConfigInvalid(f"demand.theta must lie in [0, 1), got {theta}")
        self.theta = float(theta)
        self.J = int(J)
        self.alpha = float(alpha)
        self.b_x = None if b_x is None else np.atleast_2d(np.asarray(b_x, dtype=float))
        nests = [list(n) for n in (nests or [list(range(self.J))])]
        seen = sorted(j for n in nests for j in n)
        if len(seen) != len(set(seen)) or any(j < 0 or j >= self.J for j in seen):
            raise ConfigInvalid("demand.nests must be disjoint lists of good indices")
        nests += [[j] for j in range(self.J) if j not in seen]
        self.nests = nests
        self.membership = np.zeros(self.J, dtype=int)
        for k, n in enumerate(nests):
            self.membership[n] = k
        self.same = self.membership[:, None] == self.membership[None, :]

    def delta(self, gamma, p, x=None):
        base = 0.0 if self.b_x is None or x is None else self.b_x @ np.atleast_1d(x)
        return np.asarray(gamma, dtype=float) + base - self.alpha * np.asarray(p, dtype=float)

    def components(self, gamma, p, x=None, y=0.0):
        """Return (s_j, s_{j|n}, s_0)."""
        lam = 1.0 - self.theta
        d = self.delta(gamma, p, x) / lam
        m = np.max(d, axis=-1, keepdims=True)
        e = np.exp(d - m)
        n_nest = len(self.nests)
        onehot = np.eye(n_nest)[self.membership]
        dn = e @ onehot  # inclusive sums, scaled by exp(-m)
        within = e / (dn @ onehot.T)
        # D_n^lam = exp(lam m) * dn^lam
        log_dl = lam * (np.log(dn) + m)
        top = np.maximum(np.max(log_dl, axis=-1, keepdims=True), 0.0)
        el = np.exp(log_dl - top)
        denom = np.exp(-top) + el.sum(axis=-1, keepdims=True)
        s_nest = el / denom
        s0 = np.exp(-top)[..., 0] / denom[..., 0]
        return within * (s_nest @ onehot.T), within, s0

    def shares(self, gamma, p, x=None, y=0.0) -> np.ndarray:
        return self.components(gamma, p, x, y)[0]

    def jacobian(self, gamma, p, x=None, y=0.0) -> np.ndarray:
        s, within, _ = self.components(gamma, p, x, y)
        lam = 1.0 - self.theta
        J = s.shape[-1]
        eye = np.eye(J)
        return s[..., :, None] * (eye / lam - (self.theta / lam) * within[..., None, :] * self.same
                                 - s[..., None, :])

    def to_dict(self) -> dict:
        return {"theta": self.theta, "nests": self.nests, "alpha": self.alpha,
                "b_x": None if self.b_x is None else self.b_x.tolist()}


class MixedCesDemand:
    """Expected Marshallian demand of the mixed CES model.

    Each good's index is shifted by x_j beta with beta ~ N(0, beta_sd^2),
    integrated by Gauss-Hermite quadrature (a point mass when beta_sd = 0).
    """

    discrete = False

    def __init__(self, rho=0.5, beta_sd=0.0, n_nodes=N_QUAD):
        if not 0.0 < rho < 1.0:
            raise BadRho(f"rho must lie in (0, 1), got {rho}")
        self.rho = float(rho)
        self.alpha = 1.0 / (1.0 - self.rho)
        self.beta_sd = float(beta_sd)
        if self.beta_sd == 0.0:
            self.nodes, self.weights = np.zeros(1), np.ones(1)
        else:
            self.nodes, self.weights = _quadrature(n_nodes)

    def quantities(self, gamma, p, x=None, y=1.0, beta=None):
        """Return (q_inside, q_0). ``beta`` fixes a single coefficient draw."""
        gamma = np.asarray(gamma, dtype=float)
        p = np.asarray(p, dtype=float)
        xj = np.zeros_like(p) if x is None else np.broadcast_to(np.asarray(x, dtype=float), p.shape)
        if beta is None:
            betas, weights = self.beta_sd * self.nodes, self.weights
        else:
            betas, weights = np.atleast_1d(beta), np.ones(1)
        q = np.zeros_like(gamma)
        q0 = np.zeros(gamma.shape[:-1])
        lp = np.log(p)
        for w, b in zip(weights, betas):
            v = gamma + xj * b
            denom = 1.0 + np.exp(v - self.alpha * self.rho * lp).sum(axis=-1)
            q += w * y * np.exp(v - self.alpha * lp) / denom[..., None]
            q0 += w * y / denom
        return q, q0

    def to_dict(self) -> dict:
        return {"rho": self.rho, "beta_sd": self.beta_sd}


# -- laws ----------------------------------------------------------------------

@dataclass
class ShockLaw:
    kind: str = "uniform"
    radius: float = 0.3
    mean: float = 0.0

    def draw(self, rng, J):
        if self.kind == "uniform":
            e = rng.uniform(-self.radius, self.radius, J)
        elif self.kind == "normal":
            # truncated at the declared support radius (3 sd)
            e = np.clip(rng.normal(0.0, self.radius / 3.0, J), -self.radius, self.radius)
        else:
            raise ConfigInvalid(f"shocks.kind: unknown law {self.kind!r}")
        return e


@dataclass
class InstrumentLaw:
    dim: int = 2
    low: float = -1.0
    high: float = 1.0
    constant: bool = False

    def draw(self, rng):
        if self.constant:
            return np.full(self.dim, 0.5 * (self.low + self.high))
        return rng.uniform(self.low, self.high, self.dim)


@dataclass
class XLaw:
    """Market observables. ``kind``: constant | discrete | uniform.

    ``endogeneity``: none | common_factor | xi_driven. Under common_factor a
    factor V ~ U[-1, 1] loads on every shock and a binary x = 1{V + u > 0};
    under xi_driven x = 1{xi_1 + u > 0}.
    """

    kind: str = "constant"
    dim: int = 1
    levels: list = field(default_factory=lambda: [0.0])
    probs: Optional[list] = None
    low: float = -1.0
    high: float = 1.0
    endogeneity: str = "none"
    loading: float = 0.2
    noise: float = 0.5

    @property
    def endogenous(self) -> bool:
        return self.endogeneity != "none"


@dataclass
class YLaw:
    levels: list = field(default_factory=lambda: [0.0])
    probs: Optional[list] = None

    @property
    def y0(self) -> float:
        probs = self.probs or [1.0 / len(self.levels)] * len(self.levels)
        return float(self.levels[int(np.argmax(probs))])


@dataclass
class PriceRule:
    """log p = c0 + C_w w + c_xi (xi - E xi) + C_x x, snapped to ``pitch``.

    mode "lattice" rounds prices to multiples of the pitch; "continuous"
    leaves them unrounded (pair matching then uses ``tolerance``).
    """

    c0: float = 0.0
    c_w: object = 0.3
    c_xi: float = 0.5
    c_x: object = 0.0
    pitch: float = 0.2
    mode: str = "lattice"
    tolerance: float = 0.0


def _cw_matrix(rule: PriceRule, J, L):
    c = np.asarray(rule.c_w, dtype=float)
    if c.ndim == 0:
        return c * np.eye(J, L) if L == J else np.full((J, L), float(c))
    return _mat(c, (J, L), "price.c_w")


# -- spec and records ------------------------------------------------------

@dataclass
class DgpSpec:
    variant: str = "mixed_logit"
    J: int = 2
    T: int = 200
    seed: int = 0
    grid: ZGrid = None
    index: IndexFunction = None
    demand: dict = field(default_factory=dict)
    eta: object = 0.0
    shocks: ShockLaw = field(default_factory=ShockLaw)
    instruments: InstrumentLaw = field(default_factory=InstrumentLaw)
    x_law: XLaw = field(default_factory=XLaw)
    y_law: YLaw = field(default_factory=YLaw)
    price: PriceRule = field(default_factory=PriceRule)
    name: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"variant: unknown variant {self.variant!r}")
        if self.grid is None:
            self.grid = ZGrid.around(np.zeros(self.J), 2.0, 41)
        if self.index is None:
            self.index = IndexFunction("linear", self.J, self.grid.dim, z0=self.grid.z0)
        if self.index.J != self.J or self.index.dz != self.grid.dim:
            raise ConfigInvalid("index: dimensions do not match J and the z-grid")
        if not np.allclose(self.index.z0, self.grid.z0):
            raise ConfigInvalid("index.z0 must coincide with the grid anchor")
        self.eta = _mat(self.eta, (self.J, self.x_law.dim), "eta")
        self.model = self._build_demand()
        self.validate()

    def _build_demand(self):
        d = dict(self.demand)
        if self.variant == "mixed_logit":
            return MixedLogitDemand(**d)
        if self.variant == "nested_logit":
            return NestedLogitDemand(J=self.J, **d)
        return MixedCesDemand(**d)

    def validate(self):
        # location normalization: mean shock offsets the index intercept,
        # except for the nested estimator which leaves E[xi] free
        if self.variant != "nested_logit" and not np.allclose(self.shocks.mean + self.index.offset, 0.0):
            raise ConfigInvalid("shocks.mean must cancel index.offset (E[xi] normalization)")
        if self.index.dz == self.J and not np.allclose(self.index.A, np.eye(self.J)):
            raise ConfigInvalid("index.A must be the identity (Dg(z0) = I normalization)")
        if not self.index.injective_on(self.grid):
            raise ConfigInvalid("index: g is not verifiably injective on the grid")

    @property
    def y0(self) -> float:
        return self.y_law.y0

    @property
    def shock_support(self) -> float:
        extra = abs(self.x_law.loading) if self.x_law.endogeneity == "common_factor" else 0.0
        return self.shocks.radius + extra

    def to_dict(self) -> dict:
        return {
            "name": self.name, "variant": self.variant, "J": self.J, "T": self.T, "seed": self.seed,
            "grid": self.grid.to_dict(), "index": self.index.to_dict(), "demand": dict(self.demand),
            "eta": self.eta.tolist(), "shocks": asdict(self.shocks),
            "instruments": asdict(self.instruments), "x_law": asdict(self.x_law),
            "y_law": asdict(self.y_law), "price": asdict(self.price),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DgpSpec":
        return spec_from_dict(d)


_SPEC_KEYS = {"name", "variant", "J", "T", "seed", "grid", "index", "demand", "eta", "shocks",
              "instruments", "x_law", "y_law", "price"}


def _sub(cls, d, key):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigInvalid(f"{key}: expected an object")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigInvalid(f"{key}: {exc}") from exc


def spec_from_dict(d: dict) -> DgpSpec:
    if not isinstance(d, dict):
        raise ConfigInvalid("dgp: expected an object")
    unknown = set(d) - _SPEC_KEYS
    if unknown:
        raise ConfigInvalid(f"dgp: unknown fields {sorted(unknown)}")
    J = int(d.get("J", 2))
    grid = None
    if "grid" in d:
        g = d["grid"]
        try:
            if "half_width" in g:
                grid = ZGrid.around(g.get("z0", [0.0] * J), g["half_width"], g.get("n", 41))
            else:
                grid = ZGrid.from_dict(g)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigInvalid(f"grid: {exc}") from exc
    index = None
    if "index" in d:
        ix = dict(d["index"])
        ix.setdefault("J", J)
        ix.setdefault("dz", grid.dim if grid is not None else J)
        if grid is not None:
            ix.setdefault("z0", grid.z0.tolist())
        index = _sub(IndexFunction, ix, "index")
    try:
        return DgpSpec(
            variant=d.get("variant", "mixed_logit"), J=J, T=int(d.get("T", 200)),
            seed=int(d.get("seed", 0)), grid=grid, index=index, demand=dict(d.get("demand", {})),
            eta=d.get("eta", 0.0), shocks=_sub(ShockLaw, d.get("shocks"), "shocks"),
            instruments=_sub(InstrumentLaw, d.get("instruments"), "instruments"),
            x_law=_sub(XLaw, d.get("x_law"), "x_law"), y_law=_sub(YLaw, d.get("y_law"), "y_law"),
            price=_sub(PriceRule, d.get("price"), "price"), name=d.get("name", ""))
    except TypeError as exc:
        raise ConfigInvalid(f"demand: {exc}") from exc


def load_json(path) -> dict:
    """Read a JSON config; syntax errors become ConfigInvalid with a line."""
    with open(path) as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"line {exc.lineno}: {exc.msg}") from exc


def load_spec(path) -> DgpSpec:
    d = load_json(path)
    return spec_from_dict(d.get("dgp", d))


def save_spec(spec: DgpSpec, path):
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)


@dataclass(frozen=True)
class MarketRecord:
    id: int
    x: np.ndarray
    p: np.ndarray
    w: np.ndarray
    xi_true: np.ndarray
    y_levels: tuple = (0.0,)
    factor: float = 0.0

    @property
    def cell(self) -> tuple:
        return tuple(np.round(self.x, 12).tolist())

    def price_key(self, pitch) -> tuple:
        if pitch and pitch > 0:
            return tuple(np.round(self.p / pitch).astype(int).tolist())
        return tuple(self.p.tolist())


@dataclass(frozen=True)
class ConsumerDraw:
    z: np.ndarray
    y: np.ndarray
    q: np.ndarray


@dataclass
class ConsumerSample:
    """Micro sample of one market: ``n`` consumers at each grid node.

    ``counts`` has shape (nodes, J + 1) with the outside good in column 0.
    For the CES variant ``quantities`` holds per-consumer demand vectors.
    """

    market_id: int
    grid: ZGrid
    n: int
    y: float
    counts: np.ndarray = None
    quantities: np.ndarray = None

    def empirical_shares(self, pseudo=0.0) -> np.ndarray:
        c = self.counts + pseudo
        return c[:, 1:] / c.sum(axis=1, keepdims=True)

    def draws(self) -> Iterator[ConsumerDraw]:
        pts = self.grid.points()
        y = np.atleast_1d(self.y)
        if self.counts is not None:
            eye = np.eye(self.counts.shape[1], dtype=int)
            for node, row in enumerate(self.counts):
                for alt, k in enumerate(row):
                    for _ in range(int(k)):
                        yield ConsumerDraw(pts[node], y, eye[alt])
        else:
            for node in range(pts.shape[0]):
                for q in self.quantities[node]:
                    yield ConsumerDraw(pts[node], y, q)

    def __len__(self):
        return self.grid.size * self.n


# -- market generation ------------------------------------------------------

def market_rngs(seed: int, T: int) -> list:
    """Independent per-market generators derived from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(T)]


def _draw_x(law: XLaw, rng, xi, V):
    if law.endogeneity == "common_factor":
        return np.full(law.dim, float(V + rng.uniform(-law.noise, law.noise) > 0))
    if law.endogeneity == "xi_driven":
        return np.full(law.dim, float(xi[0] + rng.uniform(-law.noise, law.noise) > 0))
    if law.endogeneity != "none":
        raise ConfigInvalid(f"x_law.endogeneity: unknown switch {law.endogeneity!r}")
    if law.kind == "constant":
        return np.broadcast_to(np.asarray(law.levels[0], dtype=float), (law.dim,)).copy()
    if law.kind == "discrete":
        k = rng.choice(len(law.levels), p=law.probs)
        return np.broadcast_to(np.asarray(law.levels[k], dtype=float), (law.dim,)).copy()
    if law.kind == "uniform":
        return rng.uniform(law.low, law.high, law.dim)
    raise ConfigInvalid(f"x_law.kind: unknown law {law.kind!r}")


def draw_primitives(spec: DgpSpec):
    """Per-market (xi, w, x, V) draws, in market order."""
    xis, ws, xs, vs = [], [], [], []
    for rng in market_rngs(spec.seed, spec.T):
        V = rng.uniform(-1.0, 1.0)
        e = spec.shocks.draw(rng, spec.J)
        if spec.x_law.endogeneity == "common_factor":
            e = spec.x_law.loading * V + e
        xi = e + spec.shocks.mean
        w = spec.instruments.draw(rng)
        x = _draw_x(spec.x_law, rng, xi - spec.shocks.mean, V)
        xis.append(xi)
        ws.append(w)
        xs.append(x)
        vs.append(V)
    return np.array(xis), np.array(ws), np.array(xs), np.array(vs)


def snap(p, pitch):
    p = np.asarray(p, dtype=float)
    return np.maximum(pitch, np.round(p / pitch) * pitch)


def price_markets(spec: DgpSpec, shocks, instruments, xs=None, factors=None) -> list:
    """Reduced-form prices for each market, snapped to the price lattice."""
    shocks = np.atleast_2d(np.asarray(shocks, dtype=float))
    instruments = np.atleast_2d(np.asarray(instruments, dtype=float))
    if shocks.shape[0] != instruments.shape[0]:
        raise ValueError("shock and instrument draws must have equal length")
    T = shocks.shape[0]
    K = spec.x_law.dim
    xs = np.zeros((T, K)) if xs is None else np.atleast_2d(np.asarray(xs, dtype=float))
    rule = spec.price
    cw = _cw_matrix(rule, spec.J, instruments.shape[1])
    cx = np.asarray(rule.c_x, dtype=float)
    cx = np.full((spec.J, K), float(cx)) if cx.ndim == 0 else _mat(cx, (spec.J, K), "price.c_x")
    logp = rule.c0 + instruments @ cw.T + rule.c_xi * (shocks - spec.shocks.mean) + xs @ cx.T
    p = np.exp(logp)
    if rule.mode == "lattice" and rule.pitch > 0:
        p = snap(p, rule.pitch)
    factors = np.zeros(T) if factors is None else factors
    y_levels = tuple(float(v) for v in spec.y_law.levels)
    return [MarketRecord(t, xs[t].copy(), p[t].copy(), instruments[t].copy(), shocks[t].copy(),
                         y_levels, float(factors[t])) for t in range(T)]


def simulate_markets(spec: DgpSpec) -> list:
    xi, w, x, V = draw_primitives(spec)
    return price_markets(spec, xi, w, x, V)


# -- choice probabilities ----------------------------------------------------

def market_index(spec: DgpSpec, market: MarketRecord, z) -> np.ndarray:
    """gamma(z) = g(z) + eta(x) + xi for an array of points."""
    return spec.index(z) + spec.eta @ market.x + market.xi_true


def ccp_values(spec: DgpSpec, market: MarketRecord, z, y=None) -> np.ndarray:
    """Vectorized population CCPs at points z (..., dz)."""
    if not spec.model.discrete:
        raise UnsupportedVariant("CES demand has no choice probabilities; use ces_expected_demand")
    y = spec.y0 if y is None else float(np.atleast_1d(y)[0])
    return spec.model.shares(market_index(spec, market, z), market.p, market.x, y)


def structural_ccp(spec: DgpSpec, market: MarketRecord, z, y=None) -> SimplexPoint:
    return SimplexPoint(ccp_values(spec, market, np.atleast_1d(np.asarray(z, dtype=float)), y))


def ccp_callable(spec: DgpSpec, market: MarketRecord, y=None):
    """Closure z -> CCPs, used as the exact population surface."""
    return lambda z: ccp_values(spec, market, z, y)


def ces_expected_demand(spec: DgpSpec, market: MarketRecord, z, y) -> np.ndarray:
    """Expected inside-good quantities; the numeraire is y - p.q."""
    if spec.variant != "mixed_ces":
        raise UnsupportedVariant("ces_expected_demand needs the mixed_ces variant")
    if y <= 0:
        raise ValueError("income must be positive")
    q, _ = spec.model.quantities(market_index(spec, market, np.asarray(z, dtype=float)),
                                 market.p, market.x, y)
    return q


def ces_numeraire(spec: DgpSpec, market: MarketRecord, z, y) -> np.ndarray:
    _, q0 = spec.model.quantities(market_index(spec, market, np.asarray(z, dtype=float)),
                                  market.p, market.x, y)
    return q0


def sigma_jacobian(spec: DgpSpec, market: MarketRecord, z, y=None) -> np.ndarray:
    y = spec.y0 if y is None else y
    return spec.model.jacobian(market_index(spec, market, z), market.p, market.x, y)


def connected_substitutes(spec: DgpSpec, market: MarketRecord, z=None) -> bool:
    """Strict diagonal dominance of d sigma / d gamma with negative
    off-diagonals at every grid node (or at the given points)."""
    pts = spec.grid.points() if z is None else np.atleast_2d(z)
    jac = sigma_jacobian(spec, market, pts)
    J = spec.J
    off = jac[..., ~np.eye(J, dtype=bool)]
    diag = np.diagonal(jac, axis1=-2, axis2=-1)
    row = np.abs(jac).sum(axis=-1) - np.abs(diag)
    return bool(np.all(off < 0) and np.all(diag > row))


def sample_consumers(spec: DgpSpec, market: MarketRecord, n: int = 0, mode: str = "population",
                     rng=None, order: str = "cubic"):
    """Population mode gives the exact CCP surface on the grid; sample mode
    draws ``n`` consumers at each grid node."""
    from .inversion import CcpSurface

    grid = spec.grid
    pts = grid.points()
    if mode == "population":
        if not spec.model.discrete:
            q = ces_expected_demand(spec, market, pts, spec.y0)
            return q.reshape(grid.shape + (spec.J,))
        vals = ccp_values(spec, market, pts).reshape(grid.shape + (spec.J,))
        return CcpSurface(market.id, grid, vals, order, exact=ccp_callable(spec, market))
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}")
    if n is None or n < 1:
        raise ValueError("sample mode needs n >= 1 consumers per cell")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(market.id), 1]))
    y = spec.y0
    if not spec.model.discrete:
        gamma = market_index(spec, market, pts)
        betas = rng.normal(0.0, spec.model.beta_sd, (pts.shape[0], n)) if spec.model.beta_sd else np.zeros((pts.shape[0], n))
        qs = np.empty((pts.shape[0], n, spec.J + 1))
        for k in range(n):
            q, q0 = _ces_draw(spec.model, gamma, market, y, betas[:, k])
            qs[:, k, 1:] = q
            qs[:, k, 0] = q0
        return ConsumerSample(market.id, grid, n, y, quantities=qs)
    s = ccp_values(spec, market, pts)
    probs = np.column_stack([1.0 - s.sum(axis=1), s])
    probs = np.clip(probs, 0.0, None)
    probs = probs / probs.sum(axis=1, keepdims=True)
    counts = rng.multinomial(n, probs)
    return ConsumerSample(market.id, grid, n, y, counts=counts)


def _ces_draw(model: MixedCesDemand, gamma, market, y, betas):
    p = market.p
    xj = np.broadcast_to(market.x, p.shape) if market.x.size == p.size else np.zeros_like(p)
    v = gamma + betas[:, None] * xj
    lp = np.log(p)
    denom = 1.0 + np.exp(v - model.alpha * model.rho * lp).sum(axis=-1)
    return y * np.exp(v - model.alpha * lp) / denom[:, None], y / denom


def sample_surface(spec: DgpSpec, market: MarketRecord, n: int, rng=None, order="cubic", pseudo=0.5):
    """CCP surface estimated from a micro sample (cell frequencies with a
    half-count correction so every cell stays interior)."""
    from .inversion import CcpSurface

    smp = sample_consumers(spec, market, n, "sample", rng)
    vals = smp.empirical_shares(pseudo).reshape(spec.grid.shape + (spec.J,))
    return CcpSurface(market.id, spec.grid, vals, order)


# -- export --------------------------------------------------------------------

def export_markets_csv(markets, path):
    if not markets:
        raise ValueError("no markets to export")
    m0 = markets[0]
    head = (["market"] + [f"x{k}" for k in range(m0.x.size)] + [f"p{j + 1}" for j in range(m0.p.size)]
            + [f"w{k}" for k in range(m0.w.size)] + [f"xi{j + 1}" for j in range(m0.p.size)])
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(head)
        for m in markets:
            out.writerow([m.id] + [repr(float(v)) for v in np.concatenate([m.x, m.p, m.w, m.xi_true])])


def export_population_csv(spec: DgpSpec, markets, surfaces, path):
    """One row per (market, grid cell)."""
    pts = spec.grid.points()
    J = spec.J
    head = (["market"] + [f"z{k + 1}" for k in range(pts.shape[1])] + [f"p{j + 1}" for j in range(J)]
            + [f"s{j + 1}" for j in range(J)])
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(head)
        for m, surf in zip(markets, surfaces):
            vals = surf.values.reshape(-1, J)
            block = np.column_stack([pts, np.broadcast_to(m.p, (pts.shape[0], J)), vals])
            for row in block:
                out.writerow([m.id] + [f"{v:.15g}" for v in row])


def export_sample_csv(sample: ConsumerSample, path):
    """One row per consumer."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        d = sample.grid.dim
        first = True
        for draw in sample.draws():
            if first:
                out.writerow(["market"] + [f"z{k + 1}" for k in range(d)] + ["y"]
                             + [f"q{k}" for k in range(draw.q.size)])
                first = False
            out.writerow([sample.market_id] + [f"{v:.15g}" for v in draw.z] + [f"{sample.y:.15g}"]
                         + [f"{v:.15g}" for v in draw.q])
