"""Inversion of choice-probability surfaces.

``invert_sigma`` maps shares back to indices for a known demand system.
``solve_z_star`` finds the consumer-observable point at which a market's
interpolated CCP surface attains a target share vector; the batched variant
solves many (market, target) problems at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .core import COND_CAP, GridInterpolator, SimplexPoint, ZGrid, batch_condition
from .errors import NonUnique, NotInImage, OutsideImage

SOLVE_TOL = 1e-10
MAX_ITER = 200
MAX_HALVINGS = 40


class CcpSurface:
    """CCPs of one market tabulated on a z-grid.

    ``values`` has shape grid.shape + (J,). When ``exact`` is given (a
    vectorized callable z -> CCPs) it can be used in place of the
    interpolant by passing ``exact=True`` to the evaluators.
    """

    def __init__(self, market_id, grid: ZGrid, values, order: str = "cubic",
                 exact: Optional[Callable] = None):
        v = np.asarray(values, dtype=float)
        if v.shape[:-1] != grid.shape:
            raise ValueError(f"surface values {v.shape} do not match grid {grid.shape}")
        if not (np.all(v > 0) and np.all(v.sum(axis=-1) < 1)):
            raise ValueError("surface values must be strictly interior to the simplex")
        v.setflags(write=False)
        self.market_id = market_id
        self.grid = grid
        self.values = v
        self.order = order
        self.exact_fn = exact
        self._interp = GridInterpolator(grid, v[None], order)

    @property
    def J(self) -> int:
        return self.values.shape[-1]

    def __call__(self, z, exact=False) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if exact and self.exact_fn is not None:
            return np.asarray(self.exact_fn(z))
        return self._interp(0, z)

    def jacobian(self, z, exact=False, step=1e-5) -> np.ndarray:
        """ds/dz at points z, shape (N, J, dz)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if exact and self.exact_fn is not None:
            cols = []
            for k in range(z.shape[1]):
                e = np.zeros(z.shape[1])
                e[k] = step
                cols.append((self.exact_fn(z + e) - self.exact_fn(z - e)) / (2 * step))
            return np.stack(cols, axis=-1)
        return self._interp(0, z, jacobian=True)[1]

    def node_values(self) -> np.ndarray:
        return self.values.reshape(-1, self.J)

    def with_order(self, order) -> "CcpSurface":
        return CcpSurface(self.market_id, self.grid, self.values, order, self.exact_fn)


class SurfaceStack:
    """Many CCP surfaces on a common grid, evaluated in one batched call."""

    def __init__(self, surfaces, order: str = None):
        if not surfaces:
            raise ValueError("empty surface list")
        self.surfaces = list(surfaces)
        self.grid = surfaces[0].grid
        self.order = order or surfaces[0].order
        self.ids = [s.market_id for s in surfaces]
        self._pos = {mid: k for k, mid in enumerate(self.ids)}
        self.values = np.stack([s.values for s in surfaces])
        self._interp = GridInterpolator(self.grid, self.values, self.order)
        self.J = self.values.shape[-1]

    def __len__(self):
        return len(self.surfaces)

    def position(self, market_id) -> int:
        return self._pos[market_id]

    def evaluate(self, b, z, jacobian=False, exact=False):
        b = np.asarray(b, dtype=int)
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if not exact:
            return self._interp(b, z, jacobian=jacobian)
        b = np.broadcast_to(b, (z.shape[0],))
        val = np.empty((z.shape[0], self.J))
        jac = np.empty((z.shape[0], self.J, z.shape[1])) if jacobian else None
        for k in np.unique(b):
            sel = b == k
            surf = self.surfaces[k]
            val[sel] = surf(z[sel], exact=True)
            if jacobian:
                jac[sel] = surf.jacobian(z[sel], exact=True)
        return (val, jac) if jacobian else val

    def node_values(self, b) -> np.ndarray:
        return self.values[b].reshape(-1, self.J)


@dataclass(frozen=True)
class InversionResult:
    z_star: np.ndarray
    residual: float
    iterations: int
    converged: bool = True


# -- sigma inverse --------------------------------------------------------

def _plain_logit(model) -> bool:
    return getattr(model, "alpha_nu", None) == 0.0 and hasattr(model, "alphas")


def invert_sigma(sigma, s, start=None, p=None, x=None, y=0.0, jac=None,
                 tol: float = 1e-10, max_iter: int = 500) -> np.ndarray:
    """Index vector gamma with sigma(gamma) = s.

    ``sigma`` is either a demand model (with ``shares`` and ``jacobian``
    methods, evaluated at prices ``p``) or a bare callable gamma -> shares.
    Plain logit and nested logit use their closed-form inverses; anything
    else runs the log-share contraction followed by damped Newton.
    """
    s = np.asarray(s, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(s > 0) and np.all(s.sum(axis=-1) < 1)):
        raise OutsideImage("target shares are not interior to the simplex")
    s0 = 1.0 - s.sum(axis=-1, keepdims=True)
    if hasattr(sigma, "shares"):
        model = sigma
        if _plain_logit(model):
            base = 0.0 if model.b_x is None or x is None else model.b_x @ np.atleast_1d(x)
            return np.log(s) - np.log(s0) + model.alphas(y)[0] * np.asarray(p) - base
        if hasattr(model, "nests"):
            onehot = np.eye(len(model.nests))[model.membership]
            within = s / ((s @ onehot) @ onehot.T)
            delta = np.log(s) - np.log(s0) - model.theta * np.log(within)
            base = 0.0 if model.b_x is None or x is None else model.b_x @ np.atleast_1d(x)
            return delta + model.alpha * np.asarray(p) - base
        f = lambda g: model.shares(g, p, x, y)
        jf = lambda g: model.jacobian(g, p, x, y)
    else:
        f = sigma
        jf = jac
    g = np.log(s) - np.log(s0) if start is None else np.array(start, dtype=float)
    # contraction to get close, then Newton polish
    for _ in range(max_iter):
        cur = f(g)
        if np.any(~np.isfinite(cur)) or np.any(cur <= 0):
            raise OutsideImage("demand evaluation left the simplex interior")
        step = np.log(s) - np.log(cur)
        g = g + step
        if np.max(np.abs(step)) < 1e-6:
            break
    for _ in range(100):
        r = f(g) - s
        if np.max(np.abs(r)) <= tol:
            return g
        if jf is not None:
            m = jf(g)
        else:
            m = np.stack([(f(g + e) - f(g - e)) / 2e-6 for e in 1e-6 * np.eye(g.shape[-1])], axis=-1)
        d = np.linalg.lstsq(m, r, rcond=None)[0] if m.ndim == 2 else np.linalg.solve(m, r[..., None])[..., 0]
        lam, base = 1.0, np.max(np.abs(r))
        while lam > 1e-8:
            cand = g - lam * d
            rc = f(cand) - s
            if np.all(np.isfinite(rc)) and np.max(np.abs(rc)) < base:
                g = cand
                break
            lam *= 0.5
        else:
            break
    if np.max(np.abs(f(g) - s)) <= tol:
        return g
    raise OutsideImage("sigma inversion did not converge")


# -- z* -----------------------------------------------------------------------

def seed_points(grid: ZGrid, n: int = 9) -> np.ndarray:
    """Multi-start seeds: a 3x3 lattice in 2-D, else centre plus Halton points."""
    lo, hi = grid.lower, grid.upper
    if grid.dim == 2 and n == 9:
        f = np.array([1 / 6, 0.5, 5 / 6])
        u = np.array([[a, b] for a in f for b in f])
    elif grid.dim == 1:
        u = ((np.arange(n) + 0.5) / n)[:, None]
    else:
        u = np.vstack([np.full(grid.dim, 0.5),
                       qmc.Halton(grid.dim, scramble=False).random(n)[1:]])
    return lo + u * (hi - lo)


def _initial_guess(stack: SurfaceStack, b, targets, per_dim=11):
    grid = stack.grid
    sub = grid.subgrid_indices(per_dim)
    pts = grid.points()[sub]
    z0 = np.empty((targets.shape[0], grid.dim))
    vals = stack.values.reshape(len(stack), -1, stack.J)[:, sub]
    for k in np.unique(b):
        sel = np.flatnonzero(b == k)
        for chunk in np.array_split(sel, max(1, sel.size // 4096)):
            d = np.abs(vals[k][None, :, :] - targets[chunk][:, None, :]).max(axis=-1)
            z0[chunk] = pts[np.argmin(d, axis=1)]
    return z0


def _newton(stack, b, targets, z, tol, max_iter, exact):
    grid = stack.grid
    n = targets.shape[0]
    it = np.zeros(n, dtype=int)
    val = stack.evaluate(b, z, exact=exact)
    res = np.max(np.abs(val - targets), axis=1)
    active = res > tol
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        bb, zz, tt = b[idx], z[idx], targets[idx]
        v, jac = stack.evaluate(bb, zz, jacobian=True, exact=exact)
        r = v - tt
        if jac.shape[-1] == jac.shape[-2]:
            ok = batch_condition(jac) < COND_CAP
            step = np.empty_like(zz)
            if np.any(ok):
                step[ok] = np.linalg.solve(jac[ok], r[ok][..., None])[..., 0]
            if np.any(~ok):
                step[~ok] = np.einsum("nij,nj->ni", np.linalg.pinv(np.nan_to_num(jac[~ok]), rcond=1e-12), r[~ok])
        else:
            step = np.einsum("nij,nj->ni", np.linalg.pinv(jac, rcond=1e-12), r)
        cur = np.max(np.abs(r), axis=1)
        lam = np.ones(idx.size)
        new_z = zz.copy()
        new_r = cur.copy()
        pending = np.ones(idx.size, dtype=bool)
        for _h in range(MAX_HALVINGS):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            cand = grid.clip(zz[p] - lam[p, None] * step[p])
            rc = np.max(np.abs(stack.evaluate(bb[p], cand, exact=exact) - tt[p]), axis=1)
            better = rc < cur[p]
            acc = p[better]
            new_z[acc] = cand[better]
            new_r[acc] = rc[better]
            pending[acc] = False
            lam[p[~better]] *= 0.5
        z[idx] = new_z
        res[idx] = new_r
        it[idx] += 1
        stalled = pending
        active[idx] = (new_r > tol) & ~stalled
    return z, res, it


def solve_z_star_batch(stack: SurfaceStack, b, targets, tol: float = SOLVE_TOL,
                       max_iter: int = MAX_ITER, exact: bool = False, start=None,
                       multistart: bool = True):
    """Solve s_b(z) = target for many (market position, target) pairs.

    Returns (z, residual, iterations, converged). Unconverged problems are
    retried from the nine multi-start seeds before giving up.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    b = np.broadcast_to(np.asarray(b, dtype=int), (targets.shape[0],)).copy()
    z = _initial_guess(stack, b, targets) if start is None else np.array(start, dtype=float)
    z, res, it = _newton(stack, b, targets, z, tol, max_iter, exact)
    bad = np.flatnonzero(res > tol)
    if multistart and bad.size:
        for seed in seed_points(stack.grid):
            if bad.size == 0:
                break
            zs = np.broadcast_to(seed, (bad.size, stack.grid.dim)).copy()
            z2, r2, i2 = _newton(stack, b[bad], targets[bad], zs, tol, max_iter, exact)
            imp = r2 < res[bad]
            z[bad[imp]] = z2[imp]
            res[bad[imp]] = r2[imp]
            it[bad] += i2
            bad = bad[res[bad] > tol]
    return z, res, it, res <= tol


def solve_z_star(surface, s_target, tol: float = SOLVE_TOL, exact: bool = False,
                 check_unique: bool = True) -> InversionResult:
    """Point z in the grid box at which the surface attains ``s_target``."""
    s = s_target.s if isinstance(s_target, SimplexPoint) else np.asarray(s_target, dtype=float)
    if not SimplexPoint.is_interior(s):
        raise NotInImage("target shares are not interior to the simplex")
    stack = surface if isinstance(surface, SurfaceStack) else SurfaceStack([surface])
    z, res, it, ok = solve_z_star_batch(stack, 0, s[None, :], tol, exact=exact)
    if not ok[0]:
        raise NotInImage(f"no point in the grid box attains the target (residual {res[0]:.3g})")
    if check_unique:
        seeds = seed_points(stack.grid)
        zs, rs, _ = _newton(stack, np.zeros(len(seeds), dtype=int), np.repeat(s[None, :], len(seeds), 0),
                            seeds.copy(), tol, MAX_ITER, exact)
        roots = zs[rs <= tol]
        pitch = float(np.max(stack.grid.pitch))
        for r in roots:
            if np.max(np.abs(r - z[0])) > pitch:
                raise NonUnique(f"distinct roots {z[0]} and {r} attain the same shares")
    return InversionResult(z[0].copy(), float(res[0]), int(it[0]), True)


def check_injectivity(surface: CcpSurface, per_dim: int = 9, tol: float = 1e-9) -> dict:
    """Grid diagnostics for injectivity of z -> s(z)."""
    grid = surface.grid
    pts = grid.points()
    jac = surface.jacobian(pts)
    report = {"nodes": int(pts.shape[0])}
    if jac.shape[-1] == jac.shape[-2]:
        det = np.linalg.det(jac)
        cond = batch_condition(jac)
        report["min_abs_det"] = float(np.min(np.abs(det)))
        report["singular_fraction"] = float(np.mean(~(cond < COND_CAP)))
        report["det_sign_changes"] = bool(np.any(det > 0) and np.any(det < 0))
    if grid.dim == 1 and surface.J == 1:
        d = np.diff(surface.values[:, 0])
        report["monotone"] = bool(np.all(d > 0) or np.all(d < 0))
    sub = grid.subgrid_indices(per_dim)
    sv = surface.node_values()[sub]
    sz = pts[sub]
    ds = np.abs(sv[:, None, :] - sv[None, :, :]).max(axis=-1)
    dz = np.abs(sz[:, None, :] - sz[None, :, :]).max(axis=-1)
    clash = (ds < tol) & (dz > np.max(grid.pitch))
    report["collisions"] = int(np.triu(clash, 1).sum())
    report["pairs_checked"] = int(len(sub) * (len(sub) - 1) // 2)
    report["injective"] = bool(report["collisions"] == 0 and report.get("singular_fraction", 0.0) == 0.0
                               and not report.get("det_sign_changes", False)
                               and report.get("monotone", True))
    return report
