"""Shock recovery by separable nonparametric IV, then conditional demand.

At the common share vector s*(x) each market's recovered index satisfies
g(z*_t) = f(x_t, p_t) - h(x_t, xi_t) with E[h | x, w] = 0, a separable
NPIV problem. It is estimated by series two-stage least squares; the
residuals f-hat - g-hat estimate h, which equals xi when x is exogenous.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations_with_replacement, product
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import qr

from .errors import ExogeneityNotAsserted, NoSupport, RankDeficient

RANK_TOL = 1e-8


class SieveBasis:
    """Tensor polynomial sieve over named variables.

    Each variable gets its own maximal degree (capped at n_unique - 1 for
    discrete variables); a monomial may involve at most ``interaction``
    distinct variables and has total degree at most ``total_degree``
    (by default the largest per-variable degree; None lifts the cap). Variables are standardized with moments from the
    data passed to ``fit``; columns that are collinear in that data are
    dropped by pivoted QR.
    """

    def __init__(self, names: Sequence[str], degree=2, interaction: int = 2,
                 additive: Sequence[str] = (), total_degree: Optional[int] = -1):
        self.names = list(names)
        deg = degree if isinstance(degree, dict) else {n: degree for n in self.names}
        self.degree = {n: int(deg.get(n, 2)) for n in self.names}
        self.interaction = int(interaction)
        # variables that enter additively (no interactions with anything)
        self.additive = set(additive)
        # -1: cap total degree at the largest per-variable degree; None: no cap
        self.total_degree = max(self.degree.values(), default=0) if total_degree == -1 else total_degree
        self.exponents = None
        self.mean = None
        self.scale = None
        self.keep = None

    @property
    def size(self) -> int:
        return 0 if self.keep is None else int(self.keep.size)

    def _monomials(self, degs):
        names = self.names
        out = []
        for e in product(*[range(degs[n] + 1) for n in names]):
            used = [n for n, k in zip(names, e) if k > 0]
            if len(used) > self.interaction:
                continue
            if self.total_degree is not None and sum(e) > self.total_degree:
                continue
            if len(used) > 1 and any(n in self.additive for n in used):
                continue
            out.append(e)
        return np.array(out, dtype=int)

    def fit(self, data: np.ndarray) -> "SieveBasis":
        data = np.atleast_2d(np.asarray(data, dtype=float))
        if data.shape[1] != len(self.names):
            raise ValueError(f"expected {len(self.names)} columns, got {data.shape[1]}")
        degs = {}
        for k, n in enumerate(self.names):
            u = np.unique(np.round(data[:, k], 12)).size
            degs[n] = min(self.degree[n], max(u - 1, 0))
        self.exponents = self._monomials(degs)
        self.mean = data.mean(axis=0)
        sd = data.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)
        raw = self._raw(data)
        self.keep = independent_columns(raw)
        return self

    def _raw(self, data):
        u = (np.atleast_2d(data) - self.mean) / self.scale
        return np.prod(u[:, None, :] ** self.exponents[None, :, :], axis=2)

    def __call__(self, data) -> np.ndarray:
        if self.keep is None:
            raise ValueError("basis not fitted")
        return self._raw(data)[:, self.keep]

    def describe(self) -> dict:
        return {"names": self.names, "degree": self.degree, "interaction": self.interaction,
                "total_degree": self.total_degree, "columns": self.size}


def independent_columns(m: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Indices (in original order) of a maximal independent column set."""
    if m.shape[1] == 0:
        return np.zeros(0, dtype=int)
    _, r, piv = qr(m, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    rank = int(np.sum(d > tol * max(d[0], 1e-300) * max(m.shape)))
    return np.sort(piv[:rank])


def _orth(m):
    q, r = np.linalg.qr(m)
    return q


def canonical_correlations(b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Canonical correlations between column spaces of b and c."""
    return np.linalg.svd(_orth(c).T @ _orth(b), compute_uv=False)


@dataclass
class NpivFit:
    coef: list                       # per-good sieve coefficients
    residuals: np.ndarray            # (T, J): f-hat minus lhs
    fitted: np.ndarray               # (T, J)
    regressor_basis: list            # one SieveBasis per good
    instrument_basis: list
    min_singular: float
    singular_values: np.ndarray
    market_ids: list
    x: np.ndarray
    p: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def J(self) -> int:
        return self.residuals.shape[1]

    def f(self, j, regressors) -> np.ndarray:
        """Evaluate f-hat_j at rows of the regressor design."""
        return self.regressor_basis[j](regressors) @ self.coef[j]

    def residual_table(self) -> dict:
        return {mid: self.residuals[k] for k, mid in enumerate(self.market_ids)}

    def to_dict(self) -> dict:
        return {"coef": [c.tolist() for c in self.coef], "residuals": self.residuals.tolist(),
                "min_singular": self.min_singular, "singular_values": self.singular_values.tolist(),
                "market_ids": list(self.market_ids), "bases": [b.describe() for b in self.regressor_basis],
                "instruments": [b.describe() for b in self.instrument_basis], "meta": self.meta}


def _tsls(B, C, y):
    """Series 2SLS of y on B with instruments C; returns (coef, fitted, svals)."""
    if C.shape[1] < B.shape[1]:
        raise RankDeficient(f"order condition fails: {C.shape[1]} instrument columns for {B.shape[1]} regressors")
    sv = canonical_correlations(B, C)
    if sv.size < B.shape[1] or sv[-1] < RANK_TOL:
        raise RankDeficient(f"first stage rank deficient (smallest canonical correlation {sv[-1] if sv.size else 0:.2e})")
    qc = _orth(C)
    bhat = qc @ (qc.T @ B)
    coef = np.linalg.lstsq(bhat, y, rcond=None)[0]
    # fitted f-hat uses the structural regressors, not their projection
    return coef, B @ coef, sv


def npiv_fit(lhs, regressors, instruments, basis: SieveBasis = None, instrument_basis: SieveBasis = None,
             market_ids=None, degree=2, interaction=2, x=None, p=None) -> NpivFit:
    """Two-stage series projection of g-hat_j(z*_t) on f_j(x_t, p_t).

    ``regressors`` and ``instruments`` are (T, k) designs (typically
    [x, p] and [x, w]). The same sieve is used for every good.
    """
    lhs = np.asarray(lhs, dtype=float)
    lhs = lhs[:, None] if lhs.ndim == 1 else lhs
    R = np.atleast_2d(np.asarray(regressors, dtype=float))
    Z = np.atleast_2d(np.asarray(instruments, dtype=float))
    T, J = lhs.shape
    if basis is None:
        basis = SieveBasis([f"r{k}" for k in range(R.shape[1])], degree, interaction)
    if instrument_basis is None:
        instrument_basis = SieveBasis([f"i{k}" for k in range(Z.shape[1])], degree, interaction)
    basis.fit(R)
    instrument_basis.fit(Z)
    B, C = basis(R), instrument_basis(Z)
    if T <= B.shape[1]:
        raise RankDeficient(f"{T} markets for {B.shape[1]} basis functions")
    coef, fitted, sv = _tsls(B, C, lhs)
    return NpivFit(list(np.asarray(coef).T), fitted - lhs, fitted, [basis] * J, [instrument_basis] * J,
                   float(sv[-1]), sv, list(range(T)) if market_ids is None else list(market_ids),
                   None if x is None else np.asarray(x), None if p is None else np.asarray(p),
                   {"regressor_columns": int(B.shape[1]), "instrument_columns": int(C.shape[1])})


def normal_equations(fit: NpivFit, regressors, instruments, projected: bool = True) -> list:
    """Per-good moment vectors at the fitted coefficients.

    With ``projected`` this is B_hat' e, B_hat being the projection of the
    regressor basis on the instrument basis, which vanishes at any 2SLS
    solution. Otherwise it is C' e, which vanishes under exact
    identification.
    """
    R, Z = np.atleast_2d(regressors), np.atleast_2d(instruments)
    out = []
    for j in range(fit.J):
        B, C = fit.regressor_basis[j](R), fit.instrument_basis[j](Z)
        e = fit.residuals[:, j]
        if projected:
            qc = _orth(C)
            out.append((qc @ (qc.T @ B)).T @ e)
        else:
            out.append(C.T @ e)
    return out


# -- BLP-instrument variant ---------------------------------------------------

def npiv_fit_blp_variant(lhs, x, p, w, own_price_only: bool = False, use_rival_x: bool = True,
                         degree: int = 2, market_ids=None, x0=None, instrument_degree: int = None) -> NpivFit:
    """Per-good NPIV with product-specific characteristics.

    The index of good j shifts with its own characteristic through an
    additive eta_j(x_j), so rival characteristics x_-j are excluded from
    f_j and serve as price instruments alongside the scalar cost shifter
    w. With ``own_price_only`` f_j depends on (x_j, p_j) only and w alone
    instruments the single price. The instrument sieve defaults to degree
    ``degree + 1`` so the quadratic price terms are over-identified.
    """
    lhs = np.atleast_2d(np.asarray(lhs, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    w = np.asarray(w, dtype=float).reshape(x.shape[0], -1)
    T, J = lhs.shape
    ideg = degree + 1 if instrument_degree is None else instrument_degree
    coef, res, fitted, bases, ibases, svs = [], np.empty((T, J)), np.empty((T, J)), [], [], []
    for j in range(J):
        if own_price_only:
            R = np.column_stack([x[:, j], p[:, j]])
            rn = ["x_own", "p_own"]
        else:
            R = np.column_stack([x[:, j], p])
            rn = ["x_own"] + [f"p{k}" for k in range(J)]
        rivals = [k for k in range(J) if k != j] if use_rival_x else []
        Z = np.column_stack([x[:, j]] + [x[:, k] for k in rivals] + [w])
        zn = ["x_own"] + [f"x_rival{k}" for k in rivals] + [f"w{k}" for k in range(w.shape[1])]
        b = SieveBasis(rn, degree, interaction=2, additive=["x_own"]).fit(R)
        c = SieveBasis(zn, ideg, interaction=2, additive=["x_own"]).fit(Z)
        B, C = b(R), c(Z)
        cj, fj, sv = _tsls(B, C, lhs[:, j])
        coef.append(cj)
        fitted[:, j] = fj
        res[:, j] = fj - lhs[:, j]
        bases.append(b)
        ibases.append(c)
        svs.append(sv[-1])
    fit = NpivFit(coef, res, fitted, bases, ibases, float(min(svs)), np.array(svs),
                  list(range(T)) if market_ids is None else list(market_ids), x, p,
                  {"variant": "blp", "own_price_only": bool(own_price_only), "rival_x": bool(use_rival_x)})
    fit.meta["x0"] = (np.zeros(J) if x0 is None else np.asarray(x0, dtype=float)).tolist()
    return fit


def eta_hat(fit: NpivFit, j: int, xj, p_ref=None) -> np.ndarray:
    """eta-hat_j(x_j) - eta-hat_j(x0_j) from the additive x_j part of f-hat_j."""
    xj = np.atleast_1d(np.asarray(xj, dtype=float))
    x0 = fit.meta.get("x0", [0.0] * fit.J)[j]
    own = fit.meta.get("own_price_only", False)
    if p_ref is None:
        p_ref = np.median(fit.p, axis=0)
    pr = np.atleast_1d(p_ref)
    tail = [pr[j]] if own else list(pr)
    rows = np.array([[v] + tail for v in xj])
    row0 = np.array([[x0] + tail])
    # f_j = sigma_j^-1 - eta_j, so eta differences carry a minus sign
    return -(fit.f(j, rows) - fit.f(j, row0))


# -- conditional demand --------------------------------------------------------

class DemandPool:
    """Observed CCP data for conditional-demand queries within x-cells.

    Holds, for each market: its surface (position in ``stack``), price,
    x-cell, recovered h-hat, and the index field of its cell.
    """

    def __init__(self, markets, stack, h_hat, fields: dict, degree: int = 2):
        self.markets = list(markets)
        self.stack = stack
        self.h_hat = {m.id: np.asarray(h_hat[k]) for k, m in enumerate(self.markets)}
        self.fields = dict(fields)
        self.degree = degree

    def cell_markets(self, x_cell):
        key = tuple(np.round(np.atleast_1d(x_cell).astype(float), 12).tolist())
        return [m for m in self.markets if m.cell == key]


def _price_design(p, pbar, scale, degree):
    u = (np.atleast_2d(p) - pbar) / scale
    k = u.shape[1]
    cols = [np.ones(u.shape[0])]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(k), d):
            cols.append(np.prod(u[:, combo], axis=1))
    return np.column_stack(cols)


def conditional_demand(pool: DemandPool, z, p, x_cell, h, y=None, mode: str = "index",
                       tol: float = 1e-2, min_markets: int = None):
    """Demand at (z, p) for the market type (x, h), pooled across markets.

    mode "index" maps every market t' of the cell to the point z' with
    g-hat(z') = g-hat(z) + h - h-hat_t', reads its observed CCP there, and
    fits log-odds by a quadratic in prices evaluated at ``p``. mode "h-match"
    pools only markets whose h-hat lies within ``tol`` of h (componentwise)
    and reads their CCPs at z itself.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    cell = pool.cell_markets(x_cell)
    if not cell:
        raise NoSupport("no markets in the requested x-cell")
    hs = np.array([pool.h_hat[m.id] for m in cell])
    if np.any(h < hs.min(axis=0) - tol) or np.any(h > hs.max(axis=0) + tol):
        raise NoSupport("h-hat outside the realized range for this cell")
    fld = pool.fields[cell[0].cell]
    stack = pool.stack
    pos = np.array([stack.position(m.id) for m in cell])
    prices = np.array([m.p for m in cell])
    if mode == "h-match":
        near = np.all(np.abs(hs - h) <= tol, axis=1)
        if not np.any(near):
            raise NoSupport("no market in the cell realizes this h within tolerance")
        zz = np.repeat(z[None, :], near.sum(), axis=0)
        s = stack.evaluate(pos[near], zz)
        prices = prices[near]
    elif mode == "index":
        target = fld.evaluate(z[None, :])[0] + h - hs
        zq, ok = index_inverse(fld, target)
        if not np.any(ok):
            raise NoSupport("no market reaches the queried index inside the z-grid")
        s = stack.evaluate(pos[ok], zq[ok])
        prices = prices[ok]
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    s0 = 1.0 - s.sum(axis=1)
    logodds = np.log(s) - np.log(s0)[:, None]
    uniq = np.unique(np.round(prices, 12), axis=0)
    pbar = prices.mean(axis=0)
    sd = prices.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    deg = pool.degree
    while deg > 0:
        X = _price_design(prices, pbar, scale, deg)
        keep = independent_columns(X)
        if uniq.shape[0] > keep.size or deg == 0:
            break
        deg -= 1
    if deg == 0 or uniq.shape[0] < 2:
        # too few price points for a price fit: read the nearest realized price
        gap = np.max(np.abs(prices - p), axis=1)
        est = logodds[gap <= gap.min() + 1e-12].mean(axis=0)
    else:
        X = _price_design(prices, pbar, scale, deg)
        keep = independent_columns(X)
        beta = np.linalg.lstsq(X[:, keep], logodds, rcond=None)[0]
        est = (_price_design(p[None, :], pbar, scale, deg)[:, keep] @ beta)[0]
    e = np.exp(est)
    return e / (1.0 + e.sum())


def index_inverse(fld, target, tol: float = 1e-10, max_iter: int = 60):
    """Solve g-hat(z) = target for many targets; returns (z, converged)."""
    from .core import GridInterpolator
    target = np.atleast_2d(target)
    grid = fld.grid
    J = fld.values.shape[1]
    vals = np.nan_to_num(fld.values, nan=0.0).reshape(grid.shape + (J,))
    jac = fld.jacobians.copy()
    jac[~fld.coverage] = np.eye(J, grid.dim)
    interp = GridInterpolator(grid, vals[None], "cubic", gradients=jac.reshape(grid.shape + (J, grid.dim))[None])
    cov = fld.coverage.reshape(grid.shape)
    z = np.broadcast_to(grid.z0, (target.shape[0], grid.dim)).copy()
    for _ in range(max_iter):
        v, dj = interp(0, z, jacobian=True)
        r = v - target
        if np.max(np.abs(r)) < tol:
            break
        step = np.linalg.solve(dj, r[..., None])[..., 0]
        z = grid.clip(z - step)
    v, _ = interp(0, z, jacobian=True)
    ok = np.max(np.abs(v - target), axis=1) < 1e6 * tol
    # only trust points whose cell corners are all covered
    u = np.clip(np.floor((z - grid.lower) / grid.pitch).astype(int), 0, np.asarray(grid.n) - 2)
    for corner in product((0, 1), repeat=grid.dim):
        ok &= cov[tuple(u[:, k] + corner[k] for k in range(grid.dim))]
    return z, ok


@dataclass
class DemandRecovery:
    xi_hat: dict
    rmse: Optional[float]
    pool: DemandPool

    def demand(self, z, p, x_cell, market_id=None, h=None, mode="index"):
        """Demand evaluator with h-hat fixed at a market's xi-hat."""
        if h is None:
            h = self.xi_hat[market_id]
        return conditional_demand(self.pool, z, p, x_cell, h, mode=mode)

    def table(self):
        return [(mid, *np.atleast_1d(v).tolist()) for mid, v in sorted(self.xi_hat.items())]


def recover_demand(fit: NpivFit, exogenous: bool, pool: DemandPool = None, xi_true=None) -> DemandRecovery:
    """Interpret h-hat as xi-hat; only valid when x is exogenous."""
    if not exogenous:
        raise ExogeneityNotAsserted("set the exogeneity flag before reading h-hat as xi-hat")
    xi_hat = fit.residual_table()
    rmse = None
    if xi_true is not None:
        xt = np.asarray(xi_true, dtype=float)
        xt = xt - xt.mean(axis=0)
        rmse = float(np.sqrt(np.mean((fit.residuals - xt) ** 2)))
    return DemandRecovery(xi_hat, rmse, pool)


def elasticities(demand_fn, p, step: float = 1e-4) -> np.ndarray:
    """Price elasticity matrix e_jk = (ds_j/dp_k) p_k / s_j by central
    differences of a demand evaluator p -> shares."""
    p = np.asarray(p, dtype=float)
    s = np.asarray(demand_fn(p))
    J = p.size
    out = np.empty((s.size, J))
    for k in range(J):
        e = np.zeros(J)
        e[k] = step
        out[:, k] = (np.asarray(demand_fn(p + e)) - np.asarray(demand_fn(p - e))) / (2 * step)
    return out * p[None, :] / s[:, None]


def write_xi_csv(rec: DemandRecovery, path, xi_true: dict = None):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        rows = rec.table()
        J = len(rows[0]) - 1 if rows else 0
        head = ["market"] + [f"xi_hat{j + 1}" for j in range(J)]
        if xi_true is not None:
            head += [f"xi_true{j + 1}" for j in range(J)]
        out.writerow(head)
        for r in rows:
            extra = [] if xi_true is None else [f"{v:.12g}" for v in xi_true[r[0]]]
            out.writerow([r[0]] + [f"{v:.12g}" for v in r[1:]] + extra)


def write_elasticity_csv(mat, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["good"] + [f"p{k + 1}" for k in range(mat.shape[1])])
        for j, row in enumerate(mat):
            out.writerow([j + 1] + [f"{v:.12g}" for v in row])
