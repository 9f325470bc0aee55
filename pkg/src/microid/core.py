"""Shared numeric types: simplex points, grids, Jacobians, interpolation and
line integration.

Everything here is a pure function of its inputs. Arrays held by the
dataclasses are made read-only on construction so values can be shared
freely between workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .errors import DomainMargin

COND_CAP = 1e8
DEFAULT_STEP = 1e-5
DEFAULT_NODES = 101


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SimplexPoint:
    """Inside-good choice probabilities; the outside share is implied."""

    s: np.ndarray

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.s, dtype=float))
        if s.ndim != 1:
            raise ValueError("SimplexPoint expects a vector of inside-good shares")
        if not (np.all(s > 0) and s.sum() < 1):
            raise ValueError(f"shares must be strictly interior, got {s}")
        object.__setattr__(self, "s", _frozen(s))

    @property
    def J(self) -> int:
        return self.s.size

    @property
    def s0(self) -> float:
        return float(1.0 - self.s.sum())

    def full(self) -> np.ndarray:
        """Shares including the outside good in position 0."""
        return np.concatenate([[self.s0], self.s])

    @staticmethod
    def is_interior(s) -> bool:
        s = np.asarray(s, dtype=float)
        return bool(np.all(np.isfinite(s)) and np.all(s > 0) and s.sum() < 1)


@dataclass(frozen=True)
class ZGrid:
    """Rectangular box of consumer observables with a regular node lattice.

    ``anchor`` is the multi-index of the normalization point z0, which must
    be strictly inside the box.
    """

    lower: np.ndarray
    upper: np.ndarray
    n: tuple
    anchor: tuple = None

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        n = tuple(int(k) for k in np.broadcast_to(np.atleast_1d(self.n), lower.shape))
        if lower.shape != upper.shape or np.any(upper <= lower):
            raise ValueError("grid needs upper > lower in every dimension")
        if any(k < 2 for k in n):
            raise ValueError("grid needs at least two points per dimension")
        anchor = self.anchor
        if anchor is None:
            anchor = tuple(k // 2 for k in n)
        anchor = tuple(int(a) for a in np.broadcast_to(np.atleast_1d(anchor), lower.shape))
        if any(a <= 0 or a >= k - 1 for a, k in zip(anchor, n)):
            raise ValueError("anchor z0 must be strictly inside the grid box")
        object.__setattr__(self, "lower", _frozen(lower))
        object.__setattr__(self, "upper", _frozen(upper))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "anchor", anchor)

    @classmethod
    def around(cls, z0, half_width, n) -> "ZGrid":
        """Grid centred on ``z0``; ``n`` should be odd so z0 is a node."""
        z0 = np.atleast_1d(np.asarray(z0, dtype=float))
        hw = np.broadcast_to(np.asarray(half_width, dtype=float), z0.shape)
        n = tuple(np.broadcast_to(np.atleast_1d(n), z0.shape).astype(int))
        if any(k % 2 == 0 for k in n):
            raise ValueError("use an odd point count so z0 is a grid node")
        return cls(z0 - hw, z0 + hw, n, tuple(k // 2 for k in n))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def shape(self) -> tuple:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def pitch(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.asarray(self.n) - 1)

    @property
    def axes(self) -> list:
        return [np.linspace(lo, hi, k) for lo, hi, k in zip(self.lower, self.upper, self.n)]

    @property
    def z0(self) -> np.ndarray:
        return self.lower + self.pitch * np.asarray(self.anchor)

    @property
    def anchor_flat(self) -> int:
        return int(np.ravel_multi_index(self.anchor, self.n))

    def points(self) -> np.ndarray:
        """All nodes, shape (size, dim), C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, z, margin=0.0) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.all((z >= self.lower + margin) & (z <= self.upper - margin), axis=-1)

    def clip(self, z) -> np.ndarray:
        return np.clip(z, self.lower, self.upper)

    def subgrid_indices(self, per_dim=9) -> np.ndarray:
        """Flat indices of an approximately uniform sub-lattice with
        ``per_dim`` nodes per axis, always including the anchor."""
        idx = []
        for k, a in zip(self.n, self.anchor):
            sel = np.unique(np.round(np.linspace(0, k - 1, min(per_dim, k))).astype(int))
            sel = np.unique(np.append(sel, a))
            idx.append(sel)
        mesh = np.meshgrid(*idx, indexing="ij")
        return np.ravel_multi_index(tuple(m.ravel() for m in mesh), self.n)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "n": list(self.n), "anchor": list(self.anchor)}

    @classmethod
    def from_dict(cls, d) -> "ZGrid":
        return cls(d["lower"], d["upper"], tuple(d["n"]), tuple(d.get("anchor") or ()) or None)


@dataclass(frozen=True)
class JacobianMatrix:
    matrix: np.ndarray
    cond: float = field(default=None)

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", _frozen(m))
        if self.cond is None:
            object.__setattr__(self, "cond", condition_number(m))

    @property
    def singular(self) -> bool:
        return not self.cond < COND_CAP

    def inv(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)


def condition_number(m) -> float:
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        return float("inf")
    sv = np.linalg.svd(m, compute_uv=False)
    return float("inf") if sv[-1] == 0 else float(sv[0] / sv[-1])


def batch_condition(m) -> np.ndarray:
    """Condition numbers of a stack of square matrices (..., J, J)."""
    sv = np.linalg.svd(np.nan_to_num(m, nan=0.0), compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = sv[..., 0] / sv[..., -1]
    c = np.where(np.all(np.isfinite(m), axis=(-2, -1)), c, np.inf)
    return np.nan_to_num(c, nan=np.inf, posinf=np.inf)


def _bounds(domain):
    if domain is None:
        return None
    if isinstance(domain, ZGrid):
        return domain.lower, domain.upper
    lo, hi = domain
    return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)


def finite_diff_jacobian(f: Callable, z, step: float = DEFAULT_STEP, domain=None) -> JacobianMatrix:
    """Central-difference Jacobian of ``f`` at ``z``.

    Raises DomainMargin when any of the 2J perturbed points falls outside
    ``domain`` (a ZGrid or a ``(lower, upper)`` pair).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if step <= 0:
        raise ValueError("step must be positive")
    b = _bounds(domain)
    if b is not None and (np.any(z - step < b[0]) or np.any(z + step > b[1])):
        raise DomainMargin(f"point {z} within {step} of the domain boundary")
    cols = []
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = step
        cols.append((np.atleast_1d(f(z + e)) - np.atleast_1d(f(z - e))) / (2 * step))
    return JacobianMatrix(np.stack(cols, axis=-1))


def simpson_weights(n_nodes: int) -> np.ndarray:
    """Composite Simpson weights on [0, 1].

    Even node counts close with a three-eighths panel over the last three
    intervals; two nodes reduce to the trapezoid rule.
    """
    if n_nodes < 2:
        raise ValueError("quadrature needs at least two nodes")
    h = 1.0 / (n_nodes - 1)
    w = np.zeros(n_nodes)
    if n_nodes == 2:
        return np.array([0.5, 0.5])
    m = n_nodes if n_nodes % 2 else n_nodes - 3
    if m >= 3:
        w[:m] += np.r_[1.0, np.tile([4.0, 2.0], (m - 3) // 2), 4.0, 1.0] * h / 3.0
    if m != n_nodes:
        w[m - 1:] += np.array([3.0, 9.0, 9.0, 3.0]) * h / 8.0
    return w


def _call_field(jac_field, pts):
    out = jac_field(pts)
    out = np.asarray(out.matrix if isinstance(out, JacobianMatrix) else out, dtype=float)
    if out.ndim == 2 and pts.shape[0] != out.shape[0]:
        # field is not vectorized: evaluate point by point
        rows = []
        for p in pts:
            v = jac_field(p)
            rows.append(np.asarray(v.matrix if isinstance(v, JacobianMatrix) else v, dtype=float))
        out = np.stack(rows)
    return out


def line_integrate_gradient(jac_field: Callable, z0, z, n_steps: int = DEFAULT_NODES,
                            domain=None) -> np.ndarray:
    """Integrate a Jacobian field along the straight segment z0 -> z.

    Returns the integral over u in [0, 1] of Jac(z0 + u (z - z0)) (z - z0),
    i.e. g(z) - g(z0) when ``jac_field`` is the Jacobian of g. ``n_steps`` is
    the number of Simpson nodes and must be odd.
    """
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    d = z - z0
    b = _bounds(domain)
    if b is not None and not (np.all(z0 >= b[0]) and np.all(z0 <= b[1])
                              and np.all(z >= b[0]) and np.all(z <= b[1])):
        raise DomainMargin("integration segment leaves the domain")
    if not np.any(d):
        return np.zeros(_call_field(jac_field, z0[None, :]).shape[-2])
    u = np.linspace(0.0, 1.0, n_steps)
    pts = z0[None, :] + u[:, None] * d[None, :]
    jac = _call_field(jac_field, pts)
    w = simpson_weights(n_steps)
    return np.einsum("n,nij,j->i", w, jac, d)


def batch_line_integrals(jac_field: Callable, z0, targets, n_steps: int = DEFAULT_NODES) -> np.ndarray:
    """Vectorized ``line_integrate_gradient`` from one origin to many targets.

    ``jac_field`` must accept an (N, dz) array and return (N, J, dz). NaN in
    the field along a segment propagates into that target's result.
    """
    z0 = np.asarray(z0, dtype=float)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    d = targets - z0[None, :]
    u = np.linspace(0.0, 1.0, n_steps)
    pts = z0[None, None, :] + u[None, :, None] * d[:, None, :]
    jac = jac_field(pts.reshape(-1, z0.size)).reshape(targets.shape[0], n_steps, -1, z0.size)
    w = simpson_weights(n_steps)
    return np.einsum("u,tuij,tj->ti", w, jac, d)


def integrate_path(jac_field: Callable, waypoints: Sequence, n_steps: int = DEFAULT_NODES,
                   domain=None) -> np.ndarray:
    """Line integral along a polygonal path through ``waypoints``."""
    pts = [np.atleast_1d(np.asarray(w, dtype=float)) for w in waypoints]
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        total = total + line_integrate_gradient(jac_field, a, b, n_steps, domain)
    return np.asarray(total)


# -- grid interpolation ---------------------------------------------------

def fd_derivative(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Fourth-order finite-difference derivative along ``axis``.

    Centred five-point stencil in the interior, one-sided five-point stencils
    on the two nodes nearest each edge. Needs at least five nodes.
    """
    v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    n = v.shape[0]
    if n < 5:
        # fall back to second order on tiny axes
        return np.moveaxis(np.gradient(v, h, axis=0, edge_order=2 if n > 2 else 1), 0, axis)
    d = np.empty_like(v)
    d[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
    d[0] = (-25 * v[0] + 48 * v[1] - 36 * v[2] + 16 * v[3] - 3 * v[4]) / (12 * h)
    d[1] = (-3 * v[0] - 10 * v[1] + 18 * v[2] - 6 * v[3] + v[4]) / (12 * h)
    d[-1] = (25 * v[-1] - 48 * v[-2] + 36 * v[-3] - 16 * v[-4] + 3 * v[-5]) / (12 * h)
    d[-2] = (3 * v[-1] + 10 * v[-2] - 18 * v[-3] + 6 * v[-4] - v[-5]) / (12 * h)
    return np.moveaxis(d, 0, axis)


def _hermite(t):
    t2, t3 = t * t, t * t * t
    return {
        (0, 0): 2 * t3 - 3 * t2 + 1, (0, 1): t3 - 2 * t2 + t,
        (1, 0): -2 * t3 + 3 * t2, (1, 1): t3 - t2,
    }, {
        (0, 0): 6 * t2 - 6 * t, (0, 1): 3 * t2 - 4 * t + 1,
        (1, 0): -6 * t2 + 6 * t, (1, 1): 3 * t2 - 2 * t,
    }


class GridInterpolator:
    """Tensor-product interpolation of a batch of gridded vector fields.

    ``values`` has shape (B, n_1, ..., n_d, C): B fields (one per market),
    each tabulated on the same grid with C output components. ``order`` is
    "cubic" (C1 tensor Hermite, node derivatives from fourth-order finite
    differences, or from ``gradients`` when given) or "linear"
    (multilinear). Queries carry a batch index per point so many markets can
    be evaluated in one vectorized call.
    """

    def __init__(self, grid: ZGrid, values, order: str = "cubic", gradients=None):
        if order not in ("cubic", "linear"):
            raise ValueError(f"unknown interpolation order {order!r}")
        self.grid = grid
        self.order = order
        v = np.asarray(values, dtype=float)
        d = grid.dim
        if v.shape[1:1 + d] != grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {grid.shape}")
        self.values = v
        self.n_out = v.shape[-1]
        self._h = grid.pitch
        self._tables = {}
        if order == "cubic":
            g = None if gradients is None else np.asarray(gradients, dtype=float)
            for m in product((0, 1), repeat=d):
                axes = [k for k in range(d) if m[k]]
                if not axes:
                    tab = v
                elif g is not None:
                    tab = g[..., axes[0]]
                    for k in axes[1:]:
                        tab = fd_derivative(tab, 1 + k, self._h[k])
                else:
                    tab = v
                    for k in axes:
                        tab = fd_derivative(tab, 1 + k, self._h[k])
                # scale derivatives to the unit cell
                scale = np.prod([self._h[k] for k in axes]) if axes else 1.0
                self._tables[m] = tab * scale

    def _locate(self, z):
        u = (z - self.grid.lower) / self._h
        hi = np.asarray(self.grid.n) - 2
        i = np.clip(np.floor(u).astype(int), 0, hi)
        t = np.clip(u - i, 0.0, 1.0)
        return i, t

    def __call__(self, b, z, jacobian=False):
        """Evaluate fields ``b`` (N,) at points ``z`` (N, d).

        Returns values (N, C), plus Jacobians (N, C, d) when requested.
        """
        z = np.atleast_2d(np.asarray(z, dtype=float))
        b = np.broadcast_to(np.asarray(b, dtype=int), (z.shape[0],))
        d = self.grid.dim
        i, t = self._locate(z)
        val = np.zeros((z.shape[0], self.n_out))
        jac = np.zeros((z.shape[0], self.n_out, d)) if jacobian else None
        if self.order == "linear":
            for c in product((0, 1), repeat=d):
                idx = (b,) + tuple(i[:, k] + c[k] for k in range(d))
                node = self.values[idx]
                w = np.ones(z.shape[0])
                for k in range(d):
                    w = w * (t[:, k] if c[k] else 1 - t[:, k])
                val += w[:, None] * node
                if jacobian:
                    for k in range(d):
                        wk = np.ones(z.shape[0])
                        for kk in range(d):
                            if kk == k:
                                wk = wk * ((1.0 if c[kk] else -1.0) / self._h[kk])
                            else:
                                wk = wk * (t[:, kk] if c[kk] else 1 - t[:, kk])
                        jac[:, :, k] += wk[:, None] * node
            return (val, jac) if jacobian else val
        basis = [_hermite(t[:, k]) for k in range(d)]
        for c in product((0, 1), repeat=d):
            idx = (b,) + tuple(i[:, k] + c[k] for k in range(d))
            for m, tab in self._tables.items():
                node = tab[idx]
                w = np.ones(z.shape[0])
                for k in range(d):
                    w = w * basis[k][0][(c[k], m[k])]
                val += w[:, None] * node
                if jacobian:
                    for k in range(d):
                        wk = np.ones(z.shape[0])
                        for kk in range(d):
                            if kk == k:
                                wk = wk * basis[kk][1][(c[kk], m[kk])] / self._h[kk]
                            else:
                                wk = wk * basis[kk][0][(c[kk], m[kk])]
                        jac[:, :, k] += wk[:, None] * node
        return (val, jac) if jacobian else val
