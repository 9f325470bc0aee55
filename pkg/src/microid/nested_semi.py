"""Semiparametric nested logit: nesting parameter, index and price
coefficient from CCP surfaces.

Under nested logit, ln(s_j / s_0) - theta ln s_{j|n} equals the mean
utility of good j. Differentiating in a consumer observable, the index
derivative is common to all markets while the within-nest term is not, so
two markets pin down theta. The index then follows by integrating the
market-averaged derivative, and the price coefficient comes from a linear
IV regression with one excluded instrument.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .core import DEFAULT_NODES, ZGrid, batch_line_integrals
from .dgp import NestedLogitDemand
from .errors import DegenerateMarkets, WeakInstrument

DENOM_FLOOR = 1e-6
FD_STEP = 1e-5
T_FLOOR = 4.0


def nest_onehot(nests, J):
    m = np.zeros(J, dtype=int)
    seen = set()
    for k, n in enumerate(nests):
        for j in n:
            m[j] = k
            seen.add(j)
    extra = [j for j in range(J) if j not in seen]
    for i, j in enumerate(extra):
        m[j] = len(nests) + i
    return np.eye(m.max() + 1)[m]


def log_terms(s, onehot):
    """(ln s_j - ln s_0, ln s_{j|n}) for shares s (..., J)."""
    s = np.asarray(s, dtype=float)
    s0 = 1.0 - s.sum(axis=-1, keepdims=True)
    within = s / ((s @ onehot) @ onehot.T)
    return np.log(s) - np.log(s0), np.log(within)


def derivative_terms(surface, z, onehot, axis=0, step=FD_STEP, exact=True):
    """Central differences of (ln s_j - ln s_0) and ln s_{j|n} along one
    z-coordinate. Returns (A, B), each (N, J)."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    e = np.zeros(z.shape[1])
    e[axis] = step
    lo_a, lo_b = log_terms(surface(z - e, exact=exact), onehot)
    hi_a, hi_b = log_terms(surface(z + e, exact=exact), onehot)
    return (hi_a - lo_a) / (2 * step), (hi_b - lo_b) / (2 * step)


def estimate_theta(surface_t, surface_tp, z, j, nests, axis=0, floor=DENOM_FLOOR,
                   step=FD_STEP, exact=True) -> float:
    """theta-hat = (A_t - A_t') / (B_t - B_t') at probe point z for good j."""
    J = surface_t.J
    oh = nest_onehot(nests, J)
    a1, b1 = derivative_terms(surface_t, z, oh, axis, step, exact)
    a2, b2 = derivative_terms(surface_tp, z, oh, axis, step, exact)
    den = b1[0, j] - b2[0, j]
    if abs(den) < floor:
        raise DegenerateMarkets(f"within-nest derivatives coincide (|dB| = {abs(den):.2e})")
    return float((a1[0, j] - a2[0, j]) / den)


def theta_pairs(surfaces, probes, nests, max_pairs=200, seed=0, axis=0, floor=DENOM_FLOOR,
                step=FD_STEP, exact=True):
    """Pairwise theta estimates over market pairs, probe points and goods
    in nests with at least two members. Returns (estimates, denominators)."""
    J = surfaces[0].J
    oh = nest_onehot(nests, J)
    goods = [j for j in range(J) if oh[:, np.argmax(oh[j])].sum() >= 2]
    probes = np.atleast_2d(probes)
    terms = [derivative_terms(s, probes, oh, axis, step, exact) for s in surfaces]
    pairs = list(combinations(range(len(surfaces)), 2))
    rng = np.random.default_rng(seed)
    if len(pairs) > max_pairs:
        pairs = [pairs[k] for k in np.sort(rng.choice(len(pairs), max_pairs, replace=False))]
    est, den = [], []
    for a, c in pairs:
        da = terms[a][0] - terms[c][0]
        db = terms[a][1] - terms[c][1]
        for j in goods:
            ok = np.abs(db[:, j]) >= floor
            est.extend((da[ok, j] / db[ok, j]).tolist())
            den.extend(np.abs(db[:, j]).tolist())
    return np.array(est), np.array(den)


def aggregate_theta(surfaces, probes, nests, **kw):
    est, den = theta_pairs(surfaces, probes, nests, **kw)
    if est.size == 0:
        raise DegenerateMarkets("no market pair clears the denominator floor")
    return float(np.median(est)), est, den


def derivative_field(surfaces, theta, nests, exact=True, step=FD_STEP):
    """z -> market-averaged dg/dz, shape (N, J, dz); also returns a
    function giving the per-market fields for disagreement checks."""
    J = surfaces[0].J
    oh = nest_onehot(nests, J)

    def per_market(z):
        z = np.atleast_2d(z)
        out = np.empty((len(surfaces), z.shape[0], J, z.shape[1]))
        for k, s in enumerate(surfaces):
            for ax in range(z.shape[1]):
                a, b = derivative_terms(s, z, oh, ax, step, exact)
                out[k, :, :, ax] = a - theta * b
        return out

    def mean_field(z):
        return per_market(z).mean(axis=0)

    return mean_field, per_market


def recover_g_nested(surfaces, theta, nests, grid: ZGrid, exact=True, n_steps=DEFAULT_NODES,
                     max_markets=None):
    """g-hat on the grid nodes with g-hat(z0) = 0.

    Returns (values (nodes, J), disagreement), the latter being the largest
    deviation of any market's derivative field from the cross-market mean
    on the nodes.
    """
    use = surfaces if max_markets is None else surfaces[:max_markets]
    mean_field, per_market = derivative_field(use, theta, nests, exact)
    nodes = grid.points()
    vals = batch_line_integrals(mean_field, grid.z0, nodes, n_steps)
    vals[grid.anchor_flat] = 0.0
    pm = per_market(nodes)
    disagreement = float(np.max(np.abs(pm - pm.mean(axis=0))))
    return vals, disagreement


def _first_stage_t(D, p, w):
    X = np.column_stack([D, w])
    beta, *_ = np.linalg.lstsq(X, p, rcond=None)
    resid = p - X @ beta
    dof = max(X.shape[0] - X.shape[1], 1)
    sig2 = resid @ resid / dof
    xtx = X.T @ X
    try:
        cov = sig2 * np.linalg.inv(xtx)
    except np.linalg.LinAlgError:
        return 0.0
    se = np.sqrt(max(cov[-1, -1], 0.0))
    if not np.isfinite(se) or se == 0 or np.var(w) == 0:
        return 0.0 if np.var(w) == 0 else np.inf
    return float(abs(beta[-1]) / se)


def estimate_alpha(markets, surfaces, g_at, theta, nests, w=None, z=None, exact=True,
                   t_floor=T_FLOOR):
    """Linear IV for the price coefficient.

    The dependent variable ln(s_j/s_0) - theta ln s_{j|n} - g-hat_j(z) equals
    c_j - alpha p_j + (xi_j - E xi_j). It is regressed on good dummies and
    p_j with the scalar cost shifter as excluded instrument. Returns
    (alpha-hat, intercepts, xi-hat (T, J)).
    """
    J = surfaces[0].J
    oh = nest_onehot(nests, J)
    z = surfaces[0].grid.z0 if z is None else np.atleast_1d(z)
    T = len(markets)
    Y = np.empty((T, J))
    for k, s in enumerate(surfaces):
        a, b = log_terms(s(z[None, :], exact=exact), oh)
        Y[k] = a[0] - theta * b[0] - g_at
    P = np.array([m.p for m in markets])
    if w is None:
        w = np.array([m.w for m in markets])
    w = np.asarray(w, dtype=float).reshape(T, -1)
    wj = w if w.shape[1] == J else np.repeat(w[:, :1], J, axis=1)
    yv, pv, wv = Y.ravel(), P.ravel(), wj.ravel()
    D = np.tile(np.eye(J), (T, 1))
    tstat = _first_stage_t(D, pv, wv)
    if not tstat >= t_floor:
        raise WeakInstrument(f"first-stage t-ratio {tstat:.2f} below {t_floor}")
    X = np.column_stack([D, pv])
    Zm = np.column_stack([D, wv])
    # just-identified IV: beta = (Z'X)^-1 Z'y
    beta = np.linalg.solve(Zm.T @ X, Zm.T @ yv)
    alpha = -float(beta[-1])
    intercepts = beta[:J]
    xi_hat = Y + alpha * P
    return alpha, intercepts, xi_hat, tstat


@dataclass
class NestedLogitEstimate:
    theta: float
    g_hat: np.ndarray
    alpha: float
    intercepts: np.ndarray
    xi_hat: np.ndarray
    grid: ZGrid
    nests: list
    diagnostics: dict = field(default_factory=dict)

    def model(self) -> NestedLogitDemand:
        return NestedLogitDemand(self.theta, self.nests, J=self.g_hat.shape[1], alpha=self.alpha)

    def predicted_surface(self, k, p) -> np.ndarray:
        """Shares at every grid node for market k from the estimates."""
        return self.model().shares(self.g_hat + self.xi_hat[k], p)

    def to_dict(self) -> dict:
        return {"theta": self.theta, "alpha": self.alpha, "intercepts": self.intercepts.tolist(),
                "nests": self.nests, "g_hat": self.g_hat.tolist(), "diagnostics": self.diagnostics}


def plug_back_error(est: NestedLogitEstimate, markets, surfaces) -> float:
    """Sup-norm gap between re-predicted and observed surfaces."""
    worst = 0.0
    for k, (m, s) in enumerate(zip(markets, surfaces)):
        pred = est.predicted_surface(k, m.p)
        worst = max(worst, float(np.max(np.abs(pred - s.node_values()))))
    return worst


def estimate_nested(markets, surfaces, nests, probes=None, exact=True, w=None, seed=0,
                    max_pairs=200, max_markets=None) -> NestedLogitEstimate:
    """Full semiparametric procedure: theta, g, alpha, xi."""
    grid = surfaces[0].grid
    if probes is None:
        idx = grid.subgrid_indices(5)
        # probes must sit strictly inside so the difference stencil fits
        pts = grid.points()[idx]
        probes = pts[grid.contains(pts, margin=2 * FD_STEP)]
    theta, est, den = aggregate_theta(surfaces, probes, nests, max_pairs=max_pairs, seed=seed, exact=exact)
    g_hat, disagreement = recover_g_nested(surfaces, theta, nests, grid, exact, max_markets=max_markets)
    alpha, icpt, xi_hat, tstat = estimate_alpha(markets, surfaces, 0.0, theta, nests, w, grid.z0, exact)
    diag = {"theta_spread": float(est.max() - est.min()), "theta_pairs": int(est.size),
            "min_denominator": float(den.min()) if den.size else None,
            "median_denominator": float(np.median(den)) if den.size else None,
            "derivative_disagreement": disagreement, "first_stage_t": tstat}
    return NestedLogitEstimate(theta, g_hat, alpha, np.asarray(icpt), xi_hat, grid, [list(n) for n in nests], diag)
