"""Causal DAGs for instrument exclusion audits.

A :class:`CausalDag` holds role-labelled nodes, directed edges and
bidirected edges. Bidirected edges stand for unmodeled common causes and are
replaced by a fresh latent parent before any query, so a single
d-separation engine serves every graph. Queries return an
:class:`ExclusionVerdict` carrying a d-connecting witness trail when
independence fails.
"""
from __future__ import annotations

import itertools
import json
import re
from collections import deque
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter

import numpy as np

from .errors import MissingRole, OverlappingSets, ParseError, SeriesTooShort

ROLES = ("W", "Xi", "X", "P", "M", "V", "L", "other", "latent")
UNIQUE_ROLES = ("W", "Xi", "X")

# accepted spellings in the text format
ROLE_ALIASES = {
    "w": "W", "instrument": "W", "cost": "W", "cost_shifter": "W",
    "xi": "Xi", "shock": "Xi", "demand_shock": "Xi",
    "x": "X", "characteristic": "X", "characteristics": "X",
    "p": "P", "price": "P",
    "m": "M", "v": "V", "common_cause": "V",
    "l": "L", "proxy": "L", "latent_cost": "L",
    "other": "other", "latent": "latent", "u": "latent",
}

_NAME = r"[A-Za-z_][A-Za-z0-9_\-\^\[\]{}'.]*"
_EDGE = re.compile(rf"^({_NAME})\s*(->|<->|<-)\s*({_NAME})$")
_NODE = re.compile(rf"^node\s+({_NAME})((?:\s+\w+=\S+)*)$")


def latent_name(a, b):
    return f"U[{a}~{b}]"


@dataclass(frozen=True)
class CausalDag:
    """Immutable DAG with role labels and optional bidirected edges.

    Parameters
    ----------
    roles : dict
        Node name to role; nodes that only appear in edges get role "other".
    edges : iterable of (str, str)
        Directed edges ``a -> b``.
    bidirected : iterable of (str, str)
        Pairs linked by an unmodeled common cause.
    name : str
    """

    roles: dict
    edges: tuple = ()
    bidirected: tuple = ()
    name: str = ""

    def __post_init__(self):
        roles = dict(self.roles)
        edges = tuple((str(a), str(b)) for a, b in self.edges)
        bi = tuple(tuple(sorted((str(a), str(b)))) for a, b in self.bidirected)
        for a, b in edges + bi:
            if a == b:
                raise ValueError(f"self loop on {a}")
            roles.setdefault(a, "other")
            roles.setdefault(b, "other")
        for n, r in roles.items():
            if r not in ROLES:
                raise ValueError(f"unknown role {r!r} for node {n}")
        for r in UNIQUE_ROLES:
            holders = [n for n, v in roles.items() if v == r]
            if len(holders) > 1:
                raise ValueError(f"role {r} assigned to several nodes: {holders}")
        object.__setattr__(self, "roles", roles)
        object.__setattr__(self, "edges", tuple(dict.fromkeys(edges)))
        object.__setattr__(self, "bidirected", tuple(dict.fromkeys(bi)))
        parents = self._parent_map()
        try:
            order = tuple(TopologicalSorter(parents).static_order())
        except CycleError as exc:
            raise ValueError(f"graph has a directed cycle: {exc.args[1]}") from None
        object.__setattr__(self, "_parents", {k: frozenset(v) for k, v in parents.items()})
        children = {n: set() for n in parents}
        for n, ps in parents.items():
            for p in ps:
                children[p].add(n)
        object.__setattr__(self, "_children", {k: frozenset(v) for k, v in children.items()})
        object.__setattr__(self, "_order", order)

    def _parent_map(self):
        nodes = list(self.roles)
        parents = {n: set() for n in nodes}
        for a, b in self.edges:
            parents[b].add(a)
        for a, b in self.bidirected:
            u = latent_name(a, b)
            parents[u] = set()
            parents[a].add(u)
            parents[b].add(u)
        return parents

    # desugared view
    @property
    def nodes(self):
        return tuple(self._order)

    @property
    def observed(self):
        return tuple(n for n in self.roles)

    def parents(self, n):
        return self._parents[n]

    def children(self, n):
        return self._children[n]

    def node_with_role(self, role):
        hits = [n for n, r in self.roles.items() if r == role]
        if not hits:
            raise MissingRole(f"no node labelled {role}")
        return hits[0]

    def role_of(self, n):
        return self.roles.get(n, "latent")

    def ancestors(self, nodes):
        """``nodes`` together with all their ancestors."""
        out = set(nodes)
        stack = list(nodes)
        while stack:
            for p in self._parents[stack.pop()]:
                if p not in out:
                    out.add(p)
                    stack.append(p)
        return out

    def directed_edges(self):
        """All directed edges after desugaring."""
        return [(p, c) for c in self._order for p in sorted(self._parents[c])]

    def to_dict(self):
        return {"name": self.name, "roles": dict(self.roles),
                "edges": [list(e) for e in self.edges],
                "bidirected": [list(e) for e in self.bidirected]}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("roles", {}), [tuple(e) for e in d.get("edges", [])],
                   [tuple(e) for e in d.get("bidirected", [])], d.get("name", ""))

    def to_text(self):
        lines = [f"node {n} role={r}" for n, r in self.roles.items() if r != "other"]
        lines += [f"{a} -> {b}" for a, b in self.edges]
        lines += [f"{a} <-> {b}" for a, b in self.bidirected]
        return "\n".join(lines) + "\n"


def parse_dag(text, name=""):
    """Read the edge-list format.

    One statement per line: ``A -> B``, ``A <- B``, ``A <-> B`` or
    ``node A role=R``. ``#`` starts a comment. Roles accept the short labels
    (W, Xi, X, P, M, V, L, latent, other) and a few long spellings such as
    ``instrument`` or ``shock``. Nodes named exactly W, Xi or X with no
    explicit role receive that role.
    """
    roles, edges, bi = {}, [], []
    explicit = set()
    for k, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _NODE.match(line)
        if m:
            node, attrs = m.group(1), m.group(2).split()
            roles.setdefault(node, "other")
            for a in attrs:
                key, _, val = a.partition("=")
                if key != "role":
                    raise ParseError(f"unknown attribute {key!r}", k)
                r = ROLE_ALIASES.get(val.lower(), val if val in ROLES else None)
                if r is None:
                    raise ParseError(f"unknown role {val!r}", k)
                roles[node] = r
                explicit.add(node)
            continue
        m = _EDGE.match(line)
        if not m:
            raise ParseError(f"cannot parse {line!r}", k)
        a, op, b = m.groups()
        if a == b:
            raise ParseError(f"self loop on {a}", k)
        for n in (a, b):
            roles.setdefault(n, "other")
        if op == "->":
            edges.append((a, b))
        elif op == "<-":
            edges.append((b, a))
        else:
            bi.append((a, b))
    for n in roles:
        if n not in explicit and n in UNIQUE_ROLES + ("P",):
            if all(roles[o] != n for o in roles if o != n):
                roles[n] = n
    try:
        return CausalDag(roles, edges, bi, name)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def load_dag(path):
    with open(path) as fh:
        return parse_dag(fh.read(), name=str(path))


@dataclass(frozen=True)
class ExclusionVerdict:
    """Outcome of ``A _||_ B | C``.

    ``witness`` is empty when independence holds; otherwise it lists
    ``(node, kind)`` along a d-connecting trail, with kind one of
    ``"end"``, ``"collider"`` or ``"through"``, and ``arrows`` records the
    edge orientation between consecutive nodes (``"->"`` or ``"<-"``).
    """

    A: tuple
    B: tuple
    C: tuple
    holds: bool
    witness: tuple = ()
    arrows: tuple = ()

    @property
    def query(self):
        cond = f" | {', '.join(self.C)}" if self.C else ""
        return f"{', '.join(self.A)} _||_ {', '.join(self.B)}{cond}"

    @property
    def verdict(self):
        return "holds" if self.holds else "fails"

    def path_string(self):
        if not self.witness:
            return ""
        out = [self.witness[0][0]]
        for (n, _), a in zip(self.witness[1:], self.arrows):
            out.append(f" {a} {n}")
        return "".join(out)

    def __str__(self):
        s = f"{self.query}: {self.verdict}"
        return s if self.holds else f"{s} (witness {self.path_string()})"

    def to_dict(self):
        return {"query": self.query, "A": list(self.A), "B": list(self.B), "C": list(self.C),
                "holds": self.holds, "witness": [list(w) for w in self.witness],
                "arrows": list(self.arrows), "path": self.path_string()}


def _as_set(x):
    if x is None:
        return ()
    if isinstance(x, str):
        return (x,)
    return tuple(dict.fromkeys(x))


def _reachable(g: CausalDag, A, C):
    """Nodes d-connected to A given C (ball passing over (node, direction))."""
    anc = g.ancestors(C)
    C = set(C)
    # direction "up": arrived from a child; "down": arrived from a parent
    todo = deque((a, "up") for a in A)
    seen, reach = set(), set()
    while todo:
        n, d = todo.popleft()
        if (n, d) in seen:
            continue
        seen.add((n, d))
        if n not in C:
            reach.add(n)
        if d == "up" and n not in C:
            todo.extend((p, "up") for p in g.parents(n))
            todo.extend((c, "down") for c in g.children(n))
        elif d == "down":
            if n not in C:
                todo.extend((c, "down") for c in g.children(n))
            if n in anc:
                todo.extend((p, "up") for p in g.parents(n))
    return reach


def _witness(g: CausalDag, A, B, C):
    """A simple d-connecting trail from A to B, found by depth-first search."""
    anc = g.ancestors(C)
    C = set(C)
    B = set(B)

    def nbrs(n):
        for p in sorted(g.parents(n)):
            yield p, "<-"
        for c in sorted(g.children(n)):
            yield c, "->"

    for a in A:
        stack = [(a, [a], [])]
        while stack:
            n, path, arrows = stack.pop()
            for m, arr in nbrs(n):
                if m in path:
                    continue
                if len(path) > 1:
                    # n is interior; check it is open given how we enter and leave
                    collider = arrows[-1] == "->" and arr == "<-"
                    if collider and n not in anc:
                        continue
                    if not collider and n in C:
                        continue
                if m in B:
                    nodes = path + [m]
                    arr_all = arrows + [arr]
                    kinds = [(nodes[0], "end")]
                    for i in range(1, len(nodes) - 1):
                        col = arr_all[i - 1] == "->" and arr_all[i] == "<-"
                        kinds.append((nodes[i], "collider" if col else "through"))
                    kinds.append((m, "end"))
                    return tuple(kinds), tuple(arr_all)
                stack.append((m, path + [m], arrows + [arr]))
    return (), ()


def d_separated(g: CausalDag, A, B, C=()) -> ExclusionVerdict:
    """Test ``A _||_ B | C`` by d-separation on the desugared DAG."""
    A, B, C = _as_set(A), _as_set(B), _as_set(C)
    if not A or not B:
        raise ValueError("A and B must be non-empty")
    if set(A) & set(B) or set(A) & set(C) or set(B) & set(C):
        raise OverlappingSets(f"sets overlap: A={A}, B={B}, C={C}")
    known = set(g.nodes)
    for n in A + B + C:
        if n not in known:
            raise KeyError(f"unknown node {n!r}")
    reach = _reachable(g, A, C)
    holds = not (reach & set(B))
    if holds:
        return ExclusionVerdict(A, B, C, True)
    wit, arr = _witness(g, A, B, C)
    return ExclusionVerdict(A, B, C, False, wit, arr)


def audit_instrument(g: CausalDag, instrument=None) -> ExclusionVerdict:
    """``W _||_ Xi | X`` for the labelled nodes; ``instrument`` overrides W."""
    w = instrument if instrument is not None else g.node_with_role("W")
    xi = g.node_with_role("Xi")
    x = g.node_with_role("X")
    return d_separated(g, w, xi, x)


def parse_query(text):
    """``"W _||_ Xi | X"`` to ``(A, B, C)``; sets may be comma separated."""
    if "_||_" not in text:
        raise ParseError(f"query needs '_||_': {text!r}")
    lhs, rest = text.split("_||_", 1)
    rhs, _, cond = rest.partition("|")

    def items(s):
        return tuple(t for t in re.split(r"[,\s]+", s.strip()) if t)

    A, B, C = items(lhs), items(rhs), items(cond)
    if not A or not B:
        raise ParseError(f"empty side in query {text!r}")
    return A, B, C


# ---------------------------------------------------------------------------
# catalogue of instrument graphs

_BASE = {"Xi": "Xi", "X": "X", "W": "W"}


def _fig(name, edges, extra=None, bidirected=(), expected=True, note=""):
    roles = dict(_BASE)
    roles.update(extra or {})
    return {"name": name, "dag": CausalDag(roles, edges, bidirected, name),
            "expected": expected, "note": note}


def builtin_figures():
    """Thirteen instrument graphs with their expected exclusion verdicts.

    Returns a list of dicts with keys ``name``, ``dag``, ``expected``
    (True when W _||_ Xi | X should hold) and ``note``.
    """
    other = {"Xi_-t": "other", "X_-t": "other"}
    return [
        _fig("exogenous", [("Xi", "X")], note="W isolated"),
        _fig("reversed", [("X", "Xi")], note="X shifts the distribution of Xi"),
        _fig("lag-fork", [("V", "Xi"), ("V", "X")], {"V": "V"}, note="common cause of Xi and X"),
        _fig("proxy-ok", [("Xi", "X"), ("L", "W")], {"L": "L"}, note="W proxies a cost shock unrelated to X"),
        _fig("x-causes-w", [("Xi", "X"), ("X", "W")]),
        _fig("proxy-still-ok",
             [("Xi", "X"), ("X", "L"), ("L", "W"), ("Xi_-t", "W"), ("X_-t", "W")],
             {"L": "L", **other}, bidirected=[("X", "X_-t")],
             note="other-market instruments with characteristics correlated across markets"),
        _fig("fork", [("X", "Xi"), ("X", "W")]),
        _fig("x-caused-by-w", [("X", "Xi"), ("W", "X")]),
        _fig("x-caused-by-l",
             [("X", "Xi"), ("L", "X"), ("L", "W"), ("Xi_-t", "W"), ("X_-t", "W")],
             {"L": "L", **other}, bidirected=[("X", "X_-t")],
             note="other-market proxies for a latent cost shock"),
        _fig("collider", [("Xi", "X"), ("W", "X")], expected=False),
        _fig("simultaneity", [("Xi", "X"), ("W", "X"), ("Xi", "P"), ("W", "P")], {"P": "P"},
             expected=False, note="X and P chosen together"),
        _fig("lag-collider", [("V", "Xi"), ("W", "X"), ("V", "X")], {"V": "V"}, expected=False),
        _fig("proxy-collider", [("Xi", "X"), ("L", "X"), ("L", "W")], {"L": "L"}, expected=False),
    ]


def golden_table(figures=None):
    """Audit every figure; rows carry expected and computed verdicts."""
    rows = []
    for f in figures or builtin_figures():
        v = audit_instrument(f["dag"])
        rows.append({"name": f["name"], "expected": "holds" if f["expected"] else "fails",
                     "computed": v.verdict, "match": v.holds == f["expected"],
                     "witness": v.path_string()})
    return rows


# ---------------------------------------------------------------------------
# sequential timing

TIMING_NODES = {"xi_prev": "Xi^t-1", "xi": "Xi^t", "m_prev": "M^t-1", "m": "M^t",
                "w": "W^t", "x": "X^t", "p": "P^t"}


def timing_dag():
    n = TIMING_NODES
    roles = {n["xi"]: "Xi", n["x"]: "X", n["w"]: "W", n["p"]: "P", n["m"]: "M",
             n["m_prev"]: "M", n["xi_prev"]: "other"}
    edges = [(n["xi_prev"], n["x"]), (n["m_prev"], n["x"]), (n["m_prev"], n["m"]),
             (n["w"], n["m"]), (n["x"], n["xi"]), (n["x"], n["p"]), (n["m"], n["p"]),
             (n["xi"], n["p"]), (n["xi_prev"], n["xi"])]
    return CausalDag(roles, edges, (), "timing")


def fit_phi(m_prev, m, degree=1):
    """Series regression of M^t on a polynomial in M^t-1 (pooled over goods)."""
    a, b = np.ravel(m_prev), np.ravel(m)
    deg = int(min(degree, max(len(np.unique(a)) - 1, 0)))
    coef = np.polynomial.polynomial.polyfit(a, b, deg)
    return lambda v: np.polynomial.polynomial.polyval(np.asarray(v, dtype=float), coef)


@dataclass
class TimingResult:
    dag: CausalDag
    verdicts: dict
    w_hat: np.ndarray
    phi: object = field(repr=False, default=None)

    def to_dict(self):
        return {"dag": self.dag.to_dict(), "verdicts": {k: v.to_dict() for k, v in self.verdicts.items()}}


def timing_instrument(series, phi=None, degree=1, g=None) -> TimingResult:
    """Innovation instrument W^t = M^t - Phi(M^t-1).

    Parameters
    ----------
    series : array (markets, periods) or (markets, periods, goods)
        Observed cost shifters; the last two periods are used.
    phi : callable, optional
        Known transition; otherwise fit by :func:`fit_phi` over all
        consecutive period pairs.
    g : CausalDag, optional
        Timing graph using the node names in ``TIMING_NODES``; defaults to
        :func:`timing_dag`.
    """
    M = np.asarray(series, dtype=float)
    if M.ndim < 2 or M.shape[1] < 2:
        raise SeriesTooShort("need at least two periods of the cost shifter")
    if phi is None:
        phi = fit_phi(M[:, :-1], M[:, 1:], degree)
    w_hat = M[:, -1] - phi(M[:, -2])
    g = g or timing_dag()
    n = TIMING_NODES
    verdicts = {name: d_separated(g, node, n["xi"], n["x"])
                for name, node in (("W^t", n["w"]), ("M^t", n["m"]), ("M^t-1", n["m_prev"]))}
    return TimingResult(g, verdicts, w_hat, phi)


# ---------------------------------------------------------------------------
# exact-enumeration oracle on small binary networks

def random_dag(n, rng, p_edge=0.4):
    """Random DAG over nodes ``v0..v{n-1}`` (edges respect index order)."""
    names = [f"v{i}" for i in range(n)]
    edges = [(names[i], names[j]) for i in range(n) for j in range(i + 1, n) if rng.random() < p_edge]
    return CausalDag({v: "other" for v in names}, edges)


def random_cpts(g: CausalDag, rng):
    """P(node = 1 | parents) for every parent configuration, uniform on (0.05, 0.95)."""
    cpts = {}
    for n in g.nodes:
        ps = sorted(g.parents(n))
        cpts[n] = (ps, rng.uniform(0.05, 0.95, size=2 ** len(ps)))
    return cpts


def joint_table(g: CausalDag, cpts):
    """Full joint over binary nodes, axis order ``g.nodes``."""
    nodes = list(g.nodes)
    idx = {n: i for i, n in enumerate(nodes)}
    P = np.ones((2,) * len(nodes))
    for cfg in itertools.product((0, 1), repeat=len(nodes)):
        pr = 1.0
        for n in nodes:
            ps, tab = cpts[n]
            k = 0
            for p in ps:
                k = 2 * k + cfg[idx[p]]
            q = tab[k]
            pr *= q if cfg[idx[n]] else 1.0 - q
        P[cfg] = pr
    return P, nodes


def ci_gap(P, nodes, A, B, C=()):
    """max |P(a,b,c) P(c) - P(a,c) P(b,c)| over configurations."""
    idx = {n: i for i, n in enumerate(nodes)}
    keep = [idx[n] for n in tuple(A) + tuple(B) + tuple(C)]
    drop = tuple(i for i in range(len(nodes)) if i not in keep)
    M = P.sum(axis=drop) if drop else P
    # reorder axes to A, B, C
    order = np.argsort(np.argsort(keep))
    M = np.transpose(M, axes=order)
    na, nb = len(A), len(B)
    abc = M
    ac = M.sum(axis=tuple(range(na, na + nb)), keepdims=True)
    bc = M.sum(axis=tuple(range(na)), keepdims=True)
    c = ac.sum(axis=tuple(range(na)), keepdims=True)
    return float(np.max(np.abs(abc * c - ac * bc)))


def oracle_check(n_graphs=200, seed=0, max_nodes=6, tol_ci=1e-12, tol_dep=1e-9):
    """Compare d-separation with exact conditional independence.

    Each random network contributes one random singleton query with a
    random conditioning set. Returns a dict with soundness (share of
    separated queries that are independent) and faithfulness (share of
    connected queries that are dependent).
    """
    rng = np.random.default_rng(seed)
    sep = sep_ok = con = con_ok = 0
    failures = []
    for k in range(n_graphs):
        n = int(rng.integers(3, max_nodes + 1))
        g = random_dag(n, rng)
        cpts = random_cpts(g, rng)
        P, nodes = joint_table(g, cpts)
        a, b = rng.choice(n, 2, replace=False)
        rest = [i for i in range(n) if i not in (a, b)]
        C = tuple(nodes[i] for i in rest if rng.random() < 0.5)
        v = d_separated(g, nodes[a], nodes[b], C)
        gap = ci_gap(P, nodes, (nodes[a],), (nodes[b],), C)
        if v.holds:
            sep += 1
            sep_ok += gap < tol_ci
            if gap >= tol_ci:
                failures.append((k, v.query, gap))
        else:
            con += 1
            con_ok += gap > tol_dep
    return {"graphs": n_graphs, "separated": sep, "connected": con,
            "soundness": sep_ok / sep if sep else 1.0,
            "faithfulness": con_ok / con if con else 1.0, "failures": failures}


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
