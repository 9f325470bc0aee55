"""Experiment runner: configured DGP, staged recovery, report.

Every stage reads only what earlier stages wrote to the output directory,
so any stage can be re-run on its own. Stage metrics are compared with the
configured tolerances; a run passes when every check passes.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import causal
from .dgp import (DgpSpec, MarketRecord, ccp_callable, export_markets_csv, load_json, sample_consumers,
                  sample_surface, simulate_markets, spec_from_dict)
from .errors import ConfigInvalid, MicroIdError, NoSupport, StageError, UnsupportedVariant
from .index_recovery import IndexField, chain_and_integrate, compare_fields, find_common_ccp, find_matched_pairs
from .inversion import CcpSurface, SurfaceStack
from .nested_semi import estimate_nested, plug_back_error
from .shock_recovery import (DemandPool, NpivFit, conditional_demand, elasticities, npiv_fit,
                             npiv_fit_blp_variant, recover_demand, write_elasticity_csv)

STAGES = ("simulate", "recover-index", "recover-shocks", "demand", "nested-logit", "dsep")
REQUIRES = {"simulate": (), "recover-index": ("simulate",), "recover-shocks": ("recover-index",),
            "demand": ("recover-shocks",), "nested-logit": ("simulate",), "dsep": ()}

# metric name -> (comparison, default bound); only metrics a stage reports are checked
DEFAULT_TOLERANCES = {
    "g_error": ("<=", 5e-2), "coverage": (">=", 0.8), "path_difference": ("<=", 1e-2),
    "xi_rmse": ("<=", 5e-2), "xi_corr": (">=", 0.98),
    "demand_error": ("<=", 2e-2),
    "theta_error": ("<=", 1e-6), "alpha_error": ("<=", 1e-2), "plug_back": ("<=", 1e-3),
}
_CONFIG_KEYS = {"name", "seed", "mode", "n_consumers", "out", "stages", "dgp", "options", "tolerances"}


@dataclass
class ExperimentConfig:
    """Validated run configuration.

    ``tolerances`` maps metric names to bounds; a bare number keeps the
    default comparison, ``[op, bound]`` sets both. ``expect_ccp`` (holds |
    fails) turns the certificate verdict into a check.
    """

    dgp: dict
    stages: list
    seed: int = 0
    mode: str = "population"
    n_consumers: int = 0
    out: str = "runs/default"
    name: str = ""
    options: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.stages:
            if s not in STAGES:
                raise ConfigInvalid(f"stages: unknown stage {s!r}")
        for s in self.stages:
            for r in REQUIRES[s]:
                if r not in self.stages:
                    raise ConfigInvalid(f"stages: {s!r} requires {r!r}")
        if self.mode not in ("population", "sample"):
            raise ConfigInvalid(f"mode: expected population or sample, got {self.mode!r}")
        if self.mode == "sample" and int(self.n_consumers) < 1:
            raise ConfigInvalid("n_consumers: sample mode needs at least one consumer per cell")
        for k in self.options:
            if k not in STAGES:
                raise ConfigInvalid(f"options: unknown stage {k!r}")
        self.spec()  # validates the DGP block

    def spec(self) -> DgpSpec:
        d = dict(self.dgp)
        d["seed"] = int(self.seed)
        try:
            return spec_from_dict(d)
        except ConfigInvalid as exc:
            raise ConfigInvalid(f"dgp.{exc}") from None

    def ordered_stages(self):
        return [s for s in STAGES if s in self.stages]

    def opts(self, stage) -> dict:
        return dict(self.options.get(stage, {}))

    def bound(self, metric):
        if metric not in self.tolerances:
            return DEFAULT_TOLERANCES.get(metric)
        v = self.tolerances[metric]
        if isinstance(v, (list, tuple)):
            return str(v[0]), v[1]
        op = DEFAULT_TOLERANCES.get(metric, ("<=", None))[0]
        return op, v

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "mode": self.mode, "n_consumers": self.n_consumers,
                "out": self.out, "stages": list(self.stages), "dgp": self.dgp, "options": self.options,
                "tolerances": self.tolerances}


def bundled_configs():
    root = resources.files("microid") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigInvalid("config: expected an object")
    unknown = set(d) - _CONFIG_KEYS
    if unknown:
        raise ConfigInvalid(f"config: unknown fields {sorted(unknown)}")
    if "dgp" not in d:
        raise ConfigInvalid("dgp: missing")
    try:
        return ExperimentConfig(dgp=d["dgp"], stages=list(d.get("stages", ["simulate"])),
                                seed=int(d.get("seed", 0)), mode=d.get("mode", "population"),
                                n_consumers=int(d.get("n_consumers", 0)),
                                out=d.get("out", f"runs/{d.get('name', 'default')}"),
                                name=d.get("name", ""), options=dict(d.get("options", {})),
                                tolerances=dict(d.get("tolerances", {})))
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"config: {exc}") from exc


def load_config(path_or_name) -> ExperimentConfig:
    """Read a config file, or a bundled config by name."""
    p = Path(str(path_or_name))
    if not p.exists():
        cand = resources.files("microid") / "configs" / f"{path_or_name}.json"
        if not cand.is_file():
            raise ConfigInvalid(f"no config file or bundled config named {path_or_name!r}")
        with resources.as_file(cand) as real:
            return config_from_dict(load_json(real))
    return config_from_dict(load_json(p))


# -- artifacts ---------------------------------------------------------------

def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _read(path):
    with open(path) as fh:
        return json.load(fh)


def _fmt(v):
    return f"{float(v):.12g}"


def _write_rows(path, head, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(head)
        for r in rows:
            out.writerow([x if isinstance(x, str) else _fmt(x) if isinstance(x, (float, np.floating)) else x
                          for x in r])


def _market_dict(m: MarketRecord):
    return {"id": m.id, "x": m.x.tolist(), "p": m.p.tolist(), "w": m.w.tolist(),
            "xi_true": m.xi_true.tolist(), "y_levels": list(m.y_levels), "factor": m.factor}


def _market_from(d):
    return MarketRecord(int(d["id"]), np.array(d["x"], dtype=float), np.array(d["p"], dtype=float),
                        np.array(d["w"], dtype=float), np.array(d["xi_true"], dtype=float),
                        tuple(d["y_levels"]), float(d["factor"]))


class Run:
    """Output directory wrapper shared by the stages."""

    def __init__(self, config: ExperimentConfig, out=None):
        self.config = config
        self.out = Path(out or config.out)
        self.tables = self.out / "tables"
        self.tables.mkdir(parents=True, exist_ok=True)
        self.spec = config.spec()

    def path(self, name):
        return self.out / name

    def require(self, name, stage):
        p = self.path(name)
        if not p.exists():
            raise MicroIdError(f"missing artifact {name}; run the {stage!r} stage first")
        return p

    def load_simulation(self):
        """(markets, stack) rebuilt from the simulate artifacts."""
        markets = [_market_from(d) for d in _read(self.require("markets.json", "simulate"))]
        with np.load(self.require("surfaces.npz", "simulate")) as z:
            values = z["values"]
            mode = str(z["mode"])
        grid = self.spec.grid
        exact = mode == "population"
        surfs = [CcpSurface(m.id, grid, values[k], exact=ccp_callable(self.spec, m) if exact else None)
                 for k, m in enumerate(markets)]
        return markets, SurfaceStack(surfs)

    def cells(self, markets):
        how = self.config.opts("recover-index").get("cells", "auto")
        if how == "pool" or (how == "auto" and self.spec.x_law.kind == "uniform"):
            return [None]
        return sorted({m.cell for m in markets})


def _cell_tag(cell):
    return "all" if cell is None else "_".join(f"{v:g}" for v in cell)


# -- stages ----------------------------------------------------------------------

def stage_simulate(run: Run):
    spec, cfg = run.spec, run.config
    markets = simulate_markets(spec)
    _dump(spec.to_dict(), run.path("dgp.json"))
    with open(run.path("markets.json"), "w") as fh:
        json.dump([_market_dict(m) for m in markets], fh)
    export_markets_csv(markets, run.tables / "markets.csv")
    if not spec.model.discrete:
        qs = np.stack([sample_consumers(spec, m) for m in markets])
        np.savez_compressed(run.path("quantities.npz"), values=qs)
        return {"markets": len(markets), "variant": spec.variant}, {}
    if cfg.mode == "population":
        vals = np.stack([sample_consumers(spec, m).values for m in markets])
    else:
        vals = np.stack([sample_surface(spec, m, cfg.n_consumers).values for m in markets])
    np.savez_compressed(run.path("surfaces.npz"), values=vals, mode=np.array(cfg.mode))
    P = np.array([m.p for m in markets])
    XI = np.array([m.xi_true for m in markets])
    corr = [float(np.corrcoef(P[:, j], XI[:, j])[0, 1]) if P[:, j].std() > 0 else 0.0 for j in range(spec.J)]
    _write_rows(run.tables / "surface_summary.csv", ["market"] + [f"mean_s{j + 1}" for j in range(spec.J)],
                [[m.id] + list(vals[k].reshape(-1, spec.J).mean(axis=0)) for k, m in enumerate(markets)])
    metrics = {"markets": len(markets), "mode": cfg.mode, "corr_p_xi": corr,
               "price_groups": len({m.price_key(spec.price.pitch) for m in markets})}
    return metrics, {}


def stage_recover_index(run: Run):
    spec = run.spec
    opts = run.config.opts("recover-index")
    markets, stack = run.load_simulation()
    exact = bool(opts.get("exact", False))
    pitch = spec.price.pitch if spec.price.mode == "lattice" else 0.0
    tol = spec.price.tolerance
    seeds = opts.get("path_seeds", [0, 1])
    fanout = int(opts.get("fanout", 6))
    do_chain = bool(opts.get("chain", True))
    per_cell, lhs_rows = {}, []
    T = len(markets)
    lhs = np.full((T, spec.J), np.nan)
    zstar = np.full((T, spec.grid.dim), np.nan)
    pos = {m.id: k for k, m in enumerate(markets)}
    errs, covs, paths, verdicts = [], [], [], []
    for cell in run.cells(markets):
        tag = _cell_tag(cell)
        cert = find_common_ccp(stack, markets, cell, exact=exact, seed=int(opts.get("ccp_seed", 0)))
        _dump(cert.to_dict(), run.path(f"certificate_{tag}.json"))
        info = {"certificate": cert.verdict, "ccp_residual": float(np.max(cert.residuals)),
                "witness": cert.witness, "markets": len(cert.market_ids)}
        verdicts.append(cert.verdict)
        if do_chain:
            pairs = find_matched_pairs(markets, stack, cell, pitch=pitch, tolerance=tol, exact=exact)
            fields = [chain_and_integrate(pairs, spec.grid, fanout=fanout, seed=int(s)) for s in seeds]
            fld = fields[0]
            fld.save(run.path(f"index_{tag}.npz"))
            fld.coverage_csv(run.tables / f"index_{tag}.csv")
            info.update(pairs=len(pairs), delta=float(pairs.delta), coverage=fld.coverage_fraction,
                        g_error=fld.error_vs(spec.index))
            if len(fields) > 1:
                info["path_difference"] = max(compare_fields(fld, f) for f in fields[1:])
            errs.append(info["g_error"])
            covs.append(info["coverage"])
            paths.append(info.get("path_difference", 0.0))
            if cert.holds:
                rows = [pos[i] for i in cert.market_ids]
                lhs[rows] = fld.evaluate(cert.z_star)
                zstar[rows] = cert.z_star
        per_cell[tag] = info
    if do_chain:
        ok = np.all(np.isfinite(lhs), axis=1)
        np.savez_compressed(run.path("lhs.npz"), lhs=lhs, z_star=zstar, ok=ok)
        for m in markets:
            k = pos[m.id]
            lhs_rows.append([m.id] + list(zstar[k]) + list(lhs[k]))
        _write_rows(run.tables / "lhs.csv", ["market"] + [f"zstar{d + 1}" for d in range(spec.grid.dim)]
                    + [f"lhs{j + 1}" for j in range(spec.J)], lhs_rows)
    metrics = {"cells": per_cell, "ccp": "holds" if all(v == "holds" for v in verdicts) else "fails"}
    if errs:
        metrics.update(g_error=max(errs), coverage=min(covs), path_difference=max(paths))
    return metrics, {}


def _regressors(markets, spec):
    X = np.array([m.x for m in markets])
    P = np.array([m.p for m in markets])
    W = np.array([m.w for m in markets])
    varying = X.std(axis=0) > 0
    Xv = X[:, varying]
    return X, P, W, np.column_stack([Xv, P]), np.column_stack([Xv, W])


def stage_recover_shocks(run: Run):
    spec = run.spec
    opts = run.config.opts("recover-shocks")
    markets = [_market_from(d) for d in _read(run.require("markets.json", "simulate"))]
    with np.load(run.require("lhs.npz", "recover-index")) as z:
        lhs, ok = z["lhs"], z["ok"]
    if not np.all(ok):
        raise MicroIdError(f"{int((~ok).sum())} markets lack a common-CCP point; shocks not identified")
    X, P, W, R, Z = _regressors(markets, spec)
    degree = int(opts.get("degree", 2))
    ids = [m.id for m in markets]
    if opts.get("variant", "standard") == "blp":
        fit = npiv_fit_blp_variant(lhs, X, P, W, own_price_only=bool(opts.get("own_price_only", False)),
                                   use_rival_x=bool(opts.get("use_rival_x", True)), degree=degree,
                                   market_ids=ids, instrument_degree=opts.get("instrument_degree"))
    else:
        fit = npiv_fit(lhs, R, Z, market_ids=ids, degree=degree, x=X, p=P)
    _dump(fit.to_dict(), run.path("npiv.json"))
    XI = np.array([m.xi_true for m in markets])
    xt = XI - XI.mean(axis=0)
    h = fit.residuals
    np.savez_compressed(run.path("h_hat.npz"), h=h, ids=np.array(ids))
    _write_rows(run.tables / "h_hat.csv", ["market"] + [f"h{j + 1}" for j in range(spec.J)]
                + [f"xi_true{j + 1}" for j in range(spec.J)],
                [[m.id] + list(h[k]) + list(XI[k]) for k, m in enumerate(markets)])
    rmse = float(np.sqrt(np.mean((h - xt) ** 2)))
    corr = min(float(np.corrcoef(h[:, j], xt[:, j])[0, 1]) for j in range(spec.J))
    metrics = {"min_canonical_corr": fit.min_singular, "h_rmse_vs_xi": rmse, "h_corr_vs_xi": corr}
    if not spec.x_law.endogenous:
        metrics.update(xi_rmse=rmse, xi_corr=corr)
    if opts.get("ols_benchmark", True) and opts.get("variant", "standard") != "blp":
        ols = npiv_fit(lhs, R, R, degree=degree)
        metrics["ols_corr"] = min(float(np.corrcoef(ols.residuals[:, j], xt[:, j])[0, 1]) for j in range(spec.J))
        metrics["ols_corr_drop"] = corr - metrics["ols_corr"]
    return metrics, {}


def stage_demand(run: Run):
    spec = run.spec
    opts = run.config.opts("demand")
    markets, stack = run.load_simulation()
    with np.load(run.require("h_hat.npz", "recover-shocks")) as z:
        h = z["h"]
    fields = {}
    for m in markets:
        if m.cell not in fields:
            p = run.path(f"index_{_cell_tag(m.cell)}.npz")
            if not p.exists():
                raise UnsupportedVariant("conditional demand needs per-cell index fields")
            fields[m.cell] = IndexField.load(p)
    pool = DemandPool(markets, stack, h, fields, degree=int(opts.get("degree", 2)))
    fit = _read(run.require("npiv.json", "recover-shocks"))
    metrics = {}
    # reading h-hat as xi-hat is only licensed under exogenous x; the flag
    # can be forced to measure what the naive reading costs
    assert_exo = bool(opts.get("assert_exogenous", not spec.x_law.endogenous))
    metrics["exogeneity_asserted"] = assert_exo
    if assert_exo:
        saved = NpivFit([], h, h, [], [], fit["min_singular"], np.array(fit["singular_values"]),
                        fit["market_ids"], None, None)
        rec = recover_demand(saved, True, pool, np.array([m.xi_true for m in markets]))
        metrics["xi_rmse_asserted"] = rec.rmse
    rng = np.random.default_rng(np.random.SeedSequence([int(run.config.seed), 7]))
    n_q = int(opts.get("queries", 40))
    jitter = float(opts.get("price_jitter", 0.1))
    reach = float(opts.get("z_fraction", 0.5))
    mode = opts.get("pooling", "index")
    grid = spec.grid
    half = 0.5 * (grid.upper - grid.lower)
    rows, worst, missed = [], 0.0, 0
    picks = rng.choice(len(markets), size=min(n_q, len(markets)), replace=False)
    for k in picks:
        m = markets[k]
        z = grid.z0 + rng.uniform(-reach, reach, grid.dim) * half
        p = m.p * np.exp(rng.uniform(-jitter, jitter, spec.J))
        truth = spec.model.shares(spec.index(z) + spec.eta @ m.x + m.xi_true, p, m.x, spec.y0)
        try:
            est = conditional_demand(pool, z, p, m.cell, h[k], mode=mode)
        except NoSupport:
            missed += 1
            continue
        err = float(np.max(np.abs(est - truth)))
        worst = max(worst, err)
        rows.append([m.id] + list(z) + list(p) + list(est) + list(truth) + [err])
    J = spec.J
    _write_rows(run.tables / "conditional_demand.csv",
                ["market"] + [f"z{d + 1}" for d in range(grid.dim)] + [f"p{j + 1}" for j in range(J)]
                + [f"s_hat{j + 1}" for j in range(J)] + [f"s_true{j + 1}" for j in range(J)] + ["abs_error"], rows)
    metrics.update(queries=len(rows), unsupported=missed, demand_error=worst if rows else float("inf"))
    m0 = markets[int(picks[0])]
    try:
        el = elasticities(lambda pp: conditional_demand(pool, grid.z0, pp, m0.cell, h[int(picks[0])], mode=mode),
                          m0.p)
        write_elasticity_csv(el, run.tables / "elasticities.csv")
        metrics["own_elasticities"] = np.diag(el).tolist()
    except NoSupport:
        metrics["own_elasticities"] = None
    checks = {}
    if rows:
        checks["answered_share"] = (len(rows) / (len(rows) + missed) >= 0.5, len(rows) / (len(rows) + missed))
    return metrics, checks


def stage_nested(run: Run):
    spec = run.spec
    if spec.variant != "nested_logit":
        raise UnsupportedVariant("the nested-logit stage needs the nested_logit variant")
    opts = run.config.opts("nested-logit")
    markets, stack = run.load_simulation()
    exact = bool(opts.get("exact", run.config.mode == "population"))
    nests = opts.get("nests", spec.demand.get("nests", [list(range(spec.J))]))
    est = estimate_nested(markets, list(stack.surfaces), nests, exact=exact, seed=int(run.config.seed),
                          max_markets=opts.get("max_markets"))
    _dump(est.to_dict(), run.path("nested.json"))
    XI = np.array([m.xi_true for m in markets])
    _write_rows(run.tables / "nested_xi.csv", ["market"] + [f"xi_hat{j + 1}" for j in range(spec.J)]
                + [f"xi_true{j + 1}" for j in range(spec.J)],
                [[m.id] + list(est.xi_hat[k]) + list(XI[k]) for k, m in enumerate(markets)])
    theta0 = float(spec.demand.get("theta", 0.0))
    alpha0 = float(spec.demand.get("alpha", 1.0))
    metrics = {"theta": est.theta, "alpha": est.alpha, "theta_error": abs(est.theta - theta0),
               "alpha_error": abs(est.alpha - alpha0), "g_error": float(np.max(np.abs(
                   est.g_hat - spec.index(spec.grid.points())))),
               "plug_back": plug_back_error(est, markets, list(stack.surfaces)),
               "diagnostics": est.diagnostics}
    return metrics, {}


def stage_dsep(run: Run):
    opts = run.config.opts("dsep")
    metrics = {}
    rows = causal.golden_table()
    _write_rows(run.tables / "figures.csv", ["figure", "expected", "computed", "match", "witness"],
                [[r["name"], r["expected"], r["computed"], str(r["match"]), r["witness"]] for r in rows])
    metrics["figures"] = len(rows)
    metrics["figures_matching"] = sum(r["match"] for r in rows)
    metrics["mismatched"] = [r["name"] for r in rows if not r["match"]]
    if "graph" in opts:
        g = causal.parse_dag(opts["graph"])
        q = opts.get("query")
        v = causal.d_separated(g, *causal.parse_query(q)) if q else causal.audit_instrument(g)
        metrics["query"] = v.to_dict()
    checks = {"figures_match": (metrics["figures_matching"] == metrics["figures"], metrics["figures_matching"])}
    return metrics, checks


STAGE_FUNCS = {"simulate": stage_simulate, "recover-index": stage_recover_index,
               "recover-shocks": stage_recover_shocks, "demand": stage_demand,
               "nested-logit": stage_nested, "dsep": stage_dsep}


def _compare(op, value, bound):
    if value is None:
        return False
    return value <= bound if op == "<=" else value >= bound if op == ">=" else value == bound


def _checks(cfg: ExperimentConfig, stage, metrics, extra):
    out = {}
    for name, value in metrics.items():
        b = cfg.bound(name)
        if b is None or b[1] is None or not isinstance(value, (int, float)) or isinstance(value, bool):
            continue
        op, bound = b
        out[name] = {"pass": bool(_compare(op, float(value), float(bound))), "value": float(value),
                     "op": op, "bound": float(bound)}
    for name, (ok, value) in extra.items():
        out[name] = {"pass": bool(ok), "value": value}
    want = cfg.tolerances.get("expect_ccp")
    if stage == "recover-index" and want is not None:
        out["ccp"] = {"pass": metrics["ccp"] == want, "value": metrics["ccp"], "expected": want}
    return out


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not np.isfinite(o):
        return None
    return o


def run_stages(cfg: ExperimentConfig, stages=None, out=None) -> dict:
    """Run the given stages (default: all configured) and return the report.

    The report merges with an existing ``report.json`` in the output
    directory so stages run separately accumulate into one file.
    """
    run = Run(cfg, out)
    stages = cfg.ordered_stages() if stages is None else [s for s in STAGES if s in stages]
    report_path = run.path("report.json")
    report = _read(report_path) if report_path.exists() else {"stages": {}}
    report["config"] = cfg.to_dict()
    timing = report.setdefault("timing", {})
    for stage in stages:
        t0 = time.perf_counter()
        try:
            metrics, extra = STAGE_FUNCS[stage](run)
        except MicroIdError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(stage, exc) from exc
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise StageError(stage, exc) from exc
        timing[stage] = time.perf_counter() - t0
        checks = _checks(cfg, stage, metrics, extra)
        report["stages"][stage] = {"seed": int(cfg.seed), "metrics": _jsonable(metrics), "checks": checks,
                                   "passed": all(c["pass"] for c in checks.values())}
    report["passed"] = all(s["passed"] for s in report["stages"].values())
    _dump(_jsonable(report), report_path)
    return report


def run(config_path, **overrides) -> dict:
    cfg = load_config(config_path)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.__post_init__()
    return run_stages(cfg)


def summarize(report: dict) -> list:
    """One line per check, for printing."""
    lines = []
    for stage, body in report.get("stages", {}).items():
        for name, c in body["checks"].items():
            extra = f" {c.get('op', '')} {c['bound']:.3g}" if "bound" in c else ""
            val = c["value"]
            val = f"{val:.4g}" if isinstance(val, float) else str(val)
            lines.append(f"[{'PASS' if c['pass'] else 'FAIL'}] {stage}: {name} = {val}{extra}")
        if not body["checks"]:
            lines.append(f"[INFO] {stage}: no checks")
    return lines
