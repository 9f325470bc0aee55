"""Recovery of the index function from matched markets.

Markets that share a price vector (and x-cell) but differ in their demand
shocks attain the same share vector at different consumer observables. At
such a matched pair the observed surface Jacobians give the ratio
Dg(z')^-1 Dg(z); starting from Dg(z0) = I these ratios are propagated
breadth-first through the grid box and the gradient field is integrated
along straight lines from z0.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree

from .core import COND_CAP, DEFAULT_NODES, JacobianMatrix, SimplexPoint, ZGrid, batch_condition, batch_line_integrals
from .errors import DisconnectedCover, NoTies, SingularJacobian
from .inversion import SurfaceStack, solve_z_star_batch

DELTA_QUANTILE = 0.95
CCP_TOL = 1e-6


@dataclass(frozen=True)
class MatchedPair:
    t: int
    t_prime: int
    p: np.ndarray
    x_cell: tuple
    s: np.ndarray
    z: np.ndarray
    z_prime: np.ndarray

    @property
    def distance(self) -> float:
        return float(np.max(np.abs(self.z - self.z_prime)))


class PairSet:
    """Matched pairs stored column-wise, plus the data needed to keep
    generating matches from any point (tie groups and surfaces).

    ``b``/``b_prime`` are positions in ``stack``; ``t``/``t_prime`` are the
    corresponding market ids.
    """

    def __init__(self, stack: Optional[SurfaceStack], groups, b, b_prime, s, z, z_prime,
                 delta: float, prices=None, x_cell=None, exact=False):
        self.stack = stack
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        self.b = np.asarray(b, dtype=int)
        self.b_prime = np.asarray(b_prime, dtype=int)
        n = self.b.size
        self.s = np.asarray(s, dtype=float).reshape(n, -1) if n else np.zeros((0, 1))
        self.z = np.asarray(z, dtype=float).reshape(n, -1) if n else np.zeros((0, 1))
        self.z_prime = np.asarray(z_prime, dtype=float).reshape(n, -1) if n else np.zeros((0, 1))
        self.delta = float(delta)
        self.prices = prices
        self.x_cell = x_cell
        self.exact = exact

    def __len__(self):
        return int(self.b.size)

    def __getitem__(self, k) -> MatchedPair:
        ids = self.stack.ids if self.stack is not None else None
        t = ids[self.b[k]] if ids else int(self.b[k])
        tp = ids[self.b_prime[k]] if ids else int(self.b_prime[k])
        p = None if self.prices is None else self.prices[self.b[k]]
        return MatchedPair(t, tp, p, self.x_cell, self.s[k], self.z[k], self.z_prime[k])

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @property
    def distances(self) -> np.ndarray:
        return np.max(np.abs(self.z - self.z_prime), axis=1) if len(self) else np.zeros(0)

    def subset(self, mask) -> "PairSet":
        return PairSet(self.stack, self.groups, self.b[mask], self.b_prime[mask], self.s[mask],
                       self.z[mask], self.z_prime[mask], self.delta, self.prices, self.x_cell, self.exact)

    @classmethod
    def from_pairs(cls, pairs, delta=np.inf) -> "PairSet":
        """Static pair list without market data (no further matching)."""
        pairs = list(pairs)
        if not pairs:
            return cls(None, [], [], [], np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 1)), delta)
        return cls(None, [], [p.t for p in pairs], [p.t_prime for p in pairs],
                   [p.s for p in pairs], [p.z for p in pairs], [p.z_prime for p in pairs], delta)


def _cell_markets(markets, x_cell):
    if x_cell is None:
        return list(markets)
    key = tuple(np.round(np.atleast_1d(x_cell).astype(float), 12).tolist())
    return [m for m in markets if m.cell == key]


def tie_groups(markets, pitch: float = 0.0, tolerance: float = 0.0) -> list:
    """Group markets by shared price vector.

    With a lattice pitch prices tie exactly; with ``tolerance`` > 0 markets
    are chained into a group when every price is within the tolerance of a
    group representative.
    """
    groups = defaultdict(list)
    if tolerance > 0:
        reps = []
        for m in markets:
            for k, r in enumerate(reps):
                if np.max(np.abs(m.p - r)) < tolerance:
                    groups[k].append(m.id)
                    break
            else:
                reps.append(m.p)
                groups[len(reps) - 1].append(m.id)
    else:
        for m in markets:
            groups[m.price_key(pitch)].append(m.id)
    return [g for g in groups.values() if len(g) >= 2]


def select_delta(distances, converged, quantile: float = DELTA_QUANTILE) -> float:
    """Smallest radius covering ``quantile`` of successful probe matches."""
    d = np.asarray(distances)[np.asarray(converged, dtype=bool)]
    if d.size == 0:
        return 0.0
    return float(np.quantile(d, quantile)) * (1 + 1e-9) + 1e-12


def find_matched_pairs(markets, surfaces, x_cell=None, pitch: float = None, tolerance: float = 0.0,
                       probe_per_dim: int = 9, delta: float = None, max_pairs_per_group: int = 60,
                       seed: int = 0, exact: bool = False) -> PairSet:
    """Probe every same-price market pair at the images of a z-subgrid.

    For market pair (t, t') and probe node z, the target is s = s_t(z) and
    z' solves s_t'(z') = s. Matches closer than ``delta`` are kept; when
    ``delta`` is None it is set to the 95% quantile of successful match
    distances.
    """
    stack = surfaces if isinstance(surfaces, SurfaceStack) else SurfaceStack(list(surfaces))
    cell = _cell_markets(markets, x_cell)
    if pitch is None:
        pitch = 0.0
    groups_ids = tie_groups(cell, pitch, tolerance)
    if not groups_ids:
        raise NoTies("no two markets in the cell share a price vector")
    groups = [np.array([stack.position(i) for i in g]) for g in groups_ids]
    rng = np.random.default_rng(seed)
    grid = stack.grid
    nodes = grid.subgrid_indices(probe_per_dim)
    zp = grid.points()[nodes]
    bt, btp = [], []
    for g in groups:
        pairs = list(combinations(g.tolist(), 2))
        if len(pairs) > max_pairs_per_group:
            pick = rng.choice(len(pairs), max_pairs_per_group, replace=False)
            pairs = [pairs[k] for k in np.sort(pick)]
        for a, c in pairs:
            bt += [a, c]
            btp += [c, a]
    bt = np.repeat(np.array(bt), len(nodes))
    btp = np.repeat(np.array(btp), len(nodes))
    z = np.tile(zp, (bt.size // len(nodes), 1))
    s = stack.evaluate(bt, z, exact=exact)
    zq, res, _, ok = solve_z_star_batch(stack, btp, s, exact=exact, multistart=False)
    dist = np.max(np.abs(zq - z), axis=1)
    if delta is None:
        delta = select_delta(dist, ok)
    keep = ok & (dist < delta)
    prices = {stack.position(m.id): m.p for m in cell}
    x_key = None if x_cell is None else tuple(np.atleast_1d(x_cell).astype(float).tolist())
    return PairSet(stack, groups, bt[keep], btp[keep], s[keep], z[keep], zq[keep], delta,
                   prices, x_key, exact)


def _ratio_from(ja, jb):
    """[J_b]^-1 J_a for stacks of Jacobians, with a singularity mask."""
    ok = (batch_condition(ja) < COND_CAP) & (batch_condition(jb) < COND_CAP)
    r = np.full(ja.shape, np.nan)
    if np.any(ok):
        r[ok] = np.linalg.solve(jb[ok], ja[ok])
    return r, ok


def jacobian_ratios(pairs: PairSet, exact: bool = None):
    """Batched ratios for every pair in the set; returns (R, ok)."""
    exact = pairs.exact if exact is None else exact
    _, ja = pairs.stack.evaluate(pairs.b, pairs.z, jacobian=True, exact=exact)
    _, jb = pairs.stack.evaluate(pairs.b_prime, pairs.z_prime, jacobian=True, exact=exact)
    return _ratio_from(ja, jb)


def jacobian_ratio(pair: MatchedPair, surfaces, exact: bool = False) -> JacobianMatrix:
    """[ds_t'/dz (z')]^-1 [ds_t/dz (z)], which equals Dg(z')^-1 Dg(z)."""
    stack = surfaces if isinstance(surfaces, SurfaceStack) else SurfaceStack(list(surfaces))
    b, bp = stack.position(pair.t), stack.position(pair.t_prime)
    _, ja = stack.evaluate(b, pair.z[None, :], jacobian=True, exact=exact)
    _, jb = stack.evaluate(bp, pair.z_prime[None, :], jacobian=True, exact=exact)
    r, ok = _ratio_from(ja, jb)
    if not ok[0]:
        raise SingularJacobian(f"surface Jacobian near-singular at pair ({pair.t}, {pair.t_prime})")
    return JacobianMatrix(r[0])


# -- index field ---------------------------------------------------------------

class IndexField:
    """Recovered index function on the grid.

    ``values`` (grid.size, J) and ``jacobians`` (grid.size, J, dz) are NaN
    off the coverage mask. ``points``/``point_jacobians`` hold the scattered
    cloud of chained Jacobians from which node values are built; when
    present, ``evaluate`` integrates that field directly from z0.
    """

    def __init__(self, grid: ZGrid, values, jacobians, coverage, points=None, point_jacobians=None,
                 diagnostics=None, n_steps=DEFAULT_NODES):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        self.jacobians = np.asarray(jacobians, dtype=float)
        self.coverage = np.asarray(coverage, dtype=bool)
        self.points = None if points is None else np.asarray(points, dtype=float)
        self.point_jacobians = None if point_jacobians is None else np.asarray(point_jacobians, dtype=float)
        self.diagnostics = dict(diagnostics or {})
        self.n_steps = n_steps
        self._field = None

    @property
    def z0(self) -> np.ndarray:
        return self.grid.z0

    @property
    def coverage_fraction(self) -> float:
        return float(self.coverage.mean())

    def jacobian_field(self):
        if self._field is None:
            if self.points is None:
                raise ValueError("no scattered Jacobian cloud stored")
            self._field = _dg_interpolator(self.points, self.point_jacobians, self.grid.z0)
        return self._field

    def evaluate(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self.points is not None:
            return batch_line_integrals(self.jacobian_field(), self.grid.z0, z, self.n_steps)
        from .core import GridInterpolator
        J = self.values.shape[1]
        vals = self.values.reshape(self.grid.shape + (J,))
        jac = self.jacobians.reshape(self.grid.shape + (J, self.grid.dim))
        interp = GridInterpolator(self.grid, vals[None], "cubic", gradients=jac[None])
        return interp(0, z)

    def error_vs(self, g_true) -> float:
        """Sup-norm error over covered nodes against a callable truth."""
        pts = self.grid.points()[self.coverage]
        return float(np.max(np.abs(self.values[self.coverage] - g_true(pts)))) if len(pts) else np.inf

    def to_dict(self) -> dict:
        def clean(a):
            return None if a is None else np.where(np.isnan(a), None, a).tolist()
        return {"grid": self.grid.to_dict(), "values": clean(self.values),
                "jacobians": clean(self.jacobians), "coverage": self.coverage.astype(int).tolist(),
                "points": clean(self.points), "point_jacobians": clean(self.point_jacobians),
                "diagnostics": self.diagnostics, "n_steps": self.n_steps}

    @classmethod
    def from_dict(cls, d) -> "IndexField":
        def arr(a):
            return None if a is None else np.array(a, dtype=float)
        return cls(ZGrid.from_dict(d["grid"]), arr(d["values"]), arr(d["jacobians"]),
                   np.array(d["coverage"], dtype=bool), arr(d.get("points")),
                   arr(d.get("point_jacobians")), d.get("diagnostics"), d.get("n_steps", DEFAULT_NODES))

    def save(self, path):
        """JSON, or a compressed numpy archive when ``path`` ends in .npz."""
        path = str(path)
        if path.endswith(".npz"):
            arrays = {"values": self.values, "jacobians": self.jacobians, "coverage": self.coverage}
            if self.points is not None:
                arrays.update(points=self.points, point_jacobians=self.point_jacobians)
            meta = json.dumps({"grid": self.grid.to_dict(), "diagnostics": self.diagnostics,
                               "n_steps": self.n_steps})
            np.savez_compressed(path, meta=np.array(meta), **arrays)
            return
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "IndexField":
        path = str(path)
        if path.endswith(".npz"):
            with np.load(path) as z:
                meta = json.loads(str(z["meta"]))
                pts = z["points"] if "points" in z else None
                pj = z["point_jacobians"] if "point_jacobians" in z else None
                return cls(ZGrid.from_dict(meta["grid"]), z["values"], z["jacobians"], z["coverage"],
                           pts, pj, meta["diagnostics"], meta["n_steps"])
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def coverage_csv(self, path):
        pts = self.grid.points()
        J = self.values.shape[1]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow([f"z{k + 1}" for k in range(pts.shape[1])] + ["covered"]
                         + [f"g{j + 1}" for j in range(J)])
            for z, c, v in zip(pts, self.coverage, self.values):
                out.writerow([f"{a:.12g}" for a in z] + [int(c)] + ["" if np.isnan(a) else f"{a:.12g}" for a in v])


def _dg_interpolator(points, jacs, z0):
    """Vectorized map z -> interpolated Dg(z) from a scattered cloud."""
    points = np.asarray(points, dtype=float)
    shape = jacs.shape[1:]
    flat = jacs.reshape(jacs.shape[0], -1)
    if points.shape[1] == 1:
        order = np.argsort(points[:, 0])
        xs, ys = points[order, 0], flat[order]

        def f1(z):
            z = np.atleast_2d(z)[:, 0]
            out = np.stack([np.interp(z, xs, ys[:, k], left=np.nan, right=np.nan)
                            for k in range(ys.shape[1])], axis=-1)
            return out.reshape((-1,) + shape)
        return f1
    lin = LinearNDInterpolator(points, flat)

    def f(z):
        return lin(np.atleast_2d(z)).reshape((-1,) + shape)
    return f


def ball_cover(grid: ZGrid, delta: float, points) -> dict:
    """Bookkeeping for the chain of balls of radius delta/2 centred on the
    lattice z0 + tau delta / J: which balls meeting the box contain chained
    points."""
    if not np.isfinite(delta) or delta <= 0:
        return {"balls": 0, "reached": 0}
    J = grid.dim
    step = delta / J
    lo = np.floor((grid.lower - grid.z0) / step).astype(int)
    hi = np.ceil((grid.upper - grid.z0) / step).astype(int)
    n_balls = int(np.prod(hi - lo + 1))
    if n_balls > 200000 or points is None or len(points) == 0:
        return {"balls": n_balls, "reached": 0, "ball_radius": delta / 2, "center_step": step}
    tau = np.round((np.asarray(points) - grid.z0) / step).astype(int)
    centres = grid.z0 + tau * step
    inside = np.linalg.norm(np.asarray(points) - centres, axis=1) < delta / 2
    reached = len({tuple(t) for t in tau[inside]})
    return {"balls": n_balls, "reached": reached, "ball_radius": delta / 2, "center_step": step}


def _bucket(z, grid, size):
    return [tuple(k) for k in np.floor((z - grid.lower) / size).astype(int)]


def _static_chain(pairs: PairSet, grid, tol):
    """BFS over an explicit pair graph. Points closer than ``tol`` are
    identified; returns (points, Dg)."""
    pts = []
    index = {}

    def key(z):
        return tuple(np.round(np.asarray(z) / tol).astype(int))

    def node(z):
        k = key(z)
        if k not in index:
            index[k] = len(pts)
            pts.append(np.asarray(z, dtype=float))
        return index[k]

    anchor = node(grid.z0)
    if len(pairs) == 0:
        return np.array(pts), np.eye(grid.dim)[None]
    if pairs.stack is not None:
        r, ok = jacobian_ratios(pairs)
    else:
        r = np.broadcast_to(np.eye(grid.dim), (len(pairs), grid.dim, grid.dim))
        ok = np.ones(len(pairs), dtype=bool)
    adj = defaultdict(list)
    for k in np.flatnonzero(ok):
        a, c = node(pairs.z[k]), node(pairs.z_prime[k])
        # Dg(z') = Dg(z) R^-1 and Dg(z) = Dg(z') R
        adj[a].append((c, np.linalg.inv(r[k])))
        adj[c].append((a, r[k]))
    dg = {anchor: np.eye(grid.dim)}
    frontier = [anchor]
    while frontier:
        nxt = []
        for a in frontier:
            for c, m in adj[a]:
                if c not in dg:
                    dg[c] = dg[a] @ m
                    nxt.append(c)
        frontier = nxt
    reached = sorted(dg)
    return np.array([pts[k] for k in reached]), np.array([dg[k] for k in reached])


def _transport_chain(pairs: PairSet, grid: ZGrid, fanout, seed, bucket_frac, max_points):
    """Breadth-first transport of Dg from z0 through matched markets."""
    stack = pairs.stack
    rng = np.random.default_rng(seed)
    groups = [g for g in pairs.groups if g.size >= 2]
    sizes = np.array([g.size * (g.size - 1) for g in groups], dtype=float)
    probs = sizes / sizes.sum()
    size = np.asarray(grid.pitch) * bucket_frac
    z0 = grid.z0
    pts = [z0.copy()]
    dgs = [np.eye(grid.dim)]
    taken = {tuple(_bucket(z0[None], grid, size)[0])}
    frontier_z = z0[None, :]
    frontier_dg = np.eye(grid.dim)[None]
    depth = 0
    while frontier_z.shape[0] and len(pts) < max_points:
        rep_z = np.repeat(frontier_z, fanout, axis=0)
        rep_dg = np.repeat(frontier_dg, fanout, axis=0)
        gsel = rng.choice(len(groups), rep_z.shape[0], p=probs)
        bt = np.empty(rep_z.shape[0], dtype=int)
        btp = np.empty(rep_z.shape[0], dtype=int)
        for k, g in enumerate(groups):
            sel = np.flatnonzero(gsel == k)
            if sel.size:
                a = rng.integers(0, g.size, sel.size)
                c = (a + rng.integers(1, g.size, sel.size)) % g.size
                bt[sel], btp[sel] = g[a], g[c]
        s, ja = stack.evaluate(bt, rep_z, jacobian=True, exact=pairs.exact)
        good = np.all(s > 0, axis=1) & (s.sum(axis=1) < 1)
        zq, _, _, ok = solve_z_star_batch(stack, btp, s, exact=pairs.exact, multistart=False)
        ok &= good & grid.contains(zq)
        ok &= np.max(np.abs(zq - rep_z), axis=1) < pairs.delta
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            break
        _, jb = stack.evaluate(btp[idx], zq[idx], jacobian=True, exact=pairs.exact)
        cond_ok = (batch_condition(ja[idx]) < COND_CAP) & (batch_condition(jb) < COND_CAP)
        idx, jb = idx[cond_ok], jb[cond_ok]
        # Dg(z') = Dg(z) J_t(z)^-1 J_t'(z')
        inv_a = np.linalg.inv(ja[idx])
        new_dg = rep_dg[idx] @ inv_a @ jb
        new_keep = []
        for k, bk in zip(range(idx.size), _bucket(zq[idx], grid, size)):
            if bk not in taken:
                taken.add(bk)
                new_keep.append(k)
        if not new_keep:
            break
        new_keep = np.array(new_keep)
        frontier_z = zq[idx][new_keep]
        frontier_dg = new_dg[new_keep]
        pts.extend(frontier_z)
        dgs.extend(frontier_dg)
        depth += 1
    return np.array(pts), np.array(dgs), depth


def chain_and_integrate(pairs: PairSet, grid: ZGrid, fanout: int = 6, seed: int = 0,
                        bucket_frac: float = 0.5, n_steps: int = DEFAULT_NODES,
                        min_coverage: float = 0.5, max_points: int = 200000,
                        static_tol: float = 1e-9) -> IndexField:
    """Propagate Jacobians from the anchor and integrate them into g-hat.

    With market data attached to ``pairs`` the propagation transports known
    points through randomly drawn same-price market pairs (``seed`` fixes the
    spanning tree); otherwise the explicit pair graph is walked. A grid node
    is covered when a chained point lies within one pitch of it and the
    straight segment from z0 stays inside the chained region.
    """
    if len(pairs) == 0:
        raise DisconnectedCover("no matched pairs: the anchor is isolated")
    if pairs.stack is not None and pairs.groups:
        pts, dgs, depth = _transport_chain(pairs, grid, fanout, seed, bucket_frac, max_points)
        mode = "transport"
    else:
        pts, dgs = _static_chain(pairs, grid, static_tol)
        depth = None
        mode = "static"
    nodes = grid.points()
    J = dgs.shape[1]
    values = np.full((grid.size, J), np.nan)
    jac = np.full((grid.size, J, grid.dim), np.nan)
    coverage = np.zeros(grid.size, dtype=bool)
    pitch = float(np.max(grid.pitch))
    if len(pts) > grid.dim + 1 or (grid.dim == 1 and len(pts) > 1):
        field_fn = _dg_interpolator(pts, dgs, grid.z0)
        d, _ = cKDTree(pts).query(nodes, p=np.inf)
        near = d <= pitch * (1 + 1e-9)
        jac_nodes = field_fn(nodes)
        jac_nodes[grid.anchor_flat] = np.eye(J, grid.dim)
        g = batch_line_integrals(field_fn, grid.z0, nodes, n_steps)
        g[grid.anchor_flat] = 0.0
        coverage = near & np.all(np.isfinite(g), axis=1) & np.all(np.isfinite(jac_nodes), axis=(1, 2))
        values[coverage] = g[coverage]
        jac[coverage] = jac_nodes[coverage]
    else:
        coverage[grid.anchor_flat] = True
        values[grid.anchor_flat] = 0.0
        jac[grid.anchor_flat] = np.eye(J, grid.dim)
        # isolated points near nodes still count as reached
        for z, m in zip(pts, dgs):
            k = np.argmin(np.abs(nodes - z).max(axis=1))
            if np.abs(nodes[k] - z).max() <= static_tol:
                coverage[k] = True
                jac[k] = m
    diag = {"mode": mode, "points": int(len(pts)), "delta": pairs.delta, "depth": depth,
            "seed": seed, "coverage": float(coverage.mean()),
            "cover": ball_cover(grid, pairs.delta, pts)}
    out = IndexField(grid, values, jac, coverage, pts if mode == "transport" else None,
                     dgs if mode == "transport" else None, diag, n_steps)
    if coverage.mean() < min_coverage:
        raise DisconnectedCover(f"chaining reached {coverage.mean():.1%} of grid nodes")
    return out


def compare_fields(a: IndexField, b: IndexField) -> float:
    """Sup-norm difference over nodes covered by both fields."""
    both = a.coverage & b.coverage
    if not np.any(both):
        return np.inf
    return float(np.max(np.abs(a.values[both] - b.values[both])))


# -- common choice probability -----------------------------------------------

@dataclass
class CcpCertificate:
    x_cell: Optional[tuple]
    s_star: np.ndarray
    residuals: np.ndarray
    market_ids: list
    z_star: np.ndarray
    tolerance: float = CCP_TOL
    witness: Optional[int] = None
    evaluations: int = 0

    @property
    def holds(self) -> bool:
        return bool(np.max(self.residuals) <= self.tolerance)

    @property
    def verdict(self) -> str:
        return "holds" if self.holds else "fails"

    def to_dict(self) -> dict:
        return {"x_cell": None if self.x_cell is None else list(self.x_cell),
                "s_star": self.s_star.tolist(), "verdict": self.verdict,
                "max_residual": float(np.max(self.residuals)), "tolerance": self.tolerance,
                "witness": self.witness, "market_ids": list(self.market_ids),
                "residuals": self.residuals.tolist(), "z_star": self.z_star.tolist()}


def ccp_objective(stack: SurfaceStack, members, s, exact=False):
    """Max over markets of the box-constrained z* residual at shares s."""
    s = np.asarray(s, dtype=float)
    if not SimplexPoint.is_interior(s):
        return np.inf, None, None
    targets = np.repeat(s[None, :], len(members), axis=0)
    z, res, _, _ = solve_z_star_batch(stack, members, targets, exact=exact, multistart=False)
    return float(np.max(res)), res, z


def find_common_ccp(surfaces, markets=None, x_cell=None, tol: float = CCP_TOL, restarts: int = 3,
                    seed: int = 0, max_evals: int = 400, exact: bool = False) -> CcpCertificate:
    """Search for a share vector attainable in every market of the cell.

    Pattern search (axis and diagonal moves) on the min-max residual,
    seeded at the centroid of the per-market image hulls and restarted
    from perturbed centroids.
    """
    stack = surfaces if isinstance(surfaces, SurfaceStack) else SurfaceStack(list(surfaces))
    if markets is not None:
        ids = [m.id for m in _cell_markets(markets, x_cell)]
        members = np.array([stack.position(i) for i in ids])
    else:
        members = np.arange(len(stack))
        ids = list(stack.ids)
    if members.size == 0:
        raise ValueError("no markets in the requested cell")
    J = stack.J
    vals = stack.values[members].reshape(members.size, -1, J)
    centroid = vals.mean(axis=1).mean(axis=0)
    dirs = [np.eye(J)[k] * sg for k in range(J) for sg in (1, -1)]
    if J > 1:
        for a, c in combinations(range(J), 2):
            for sa in (1, -1):
                for sc in (1, -1):
                    d = np.zeros(J)
                    d[a], d[c] = sa, sc
                    dirs.append(d / np.sqrt(2))
    rng = np.random.default_rng(seed)
    scale = float(np.mean(vals.max(axis=1) - vals.min(axis=1)))
    best_s, best_f = centroid, np.inf
    evals = 0
    for r in range(restarts):
        s = centroid if r == 0 else centroid + rng.uniform(-0.25, 0.25, J) * scale
        f, _, _ = ccp_objective(stack, members, s, exact)
        evals += 1
        step = 0.25 * scale
        while step > 1e-9 and f > tol and evals < max_evals:
            moved = False
            for d in dirs:
                cand = s + step * d
                fc, _, _ = ccp_objective(stack, members, cand, exact)
                evals += 1
                if fc < f:
                    s, f, moved = cand, fc, True
                    break
            if not moved:
                step *= 0.5
        if f < best_f:
            best_s, best_f = s, f
        if best_f <= tol:
            break
    _, res, z = ccp_objective(stack, members, best_s, exact)
    if res is None:
        res = np.full(members.size, np.inf)
        z = np.full((members.size, stack.grid.dim), np.nan)
    witness = None if np.max(res) <= tol else ids[int(np.argmax(res))]
    key = None if x_cell is None else tuple(np.atleast_1d(x_cell).astype(float).tolist())
    return CcpCertificate(key, np.asarray(best_s), res, ids, z, tol, witness, evals)
