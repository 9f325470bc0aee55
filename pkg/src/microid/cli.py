"""Command line entry point: ``microid <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import causal
from .errors import ConfigInvalid, MicroIdError, ParseError, StageError
from .pipeline import bundled_configs, load_config, run_stages, summarize

STAGE_OF = {"simulate": ["simulate"], "recover-index": ["recover-index"],
            "recover-shocks": ["recover-shocks", "demand"], "nested-logit": ["nested-logit"]}


def _run_args(p):
    p.add_argument("--config", required=True, help="config file or bundled config name")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--mode", choices=["population", "sample"])
    p.add_argument("--n-consumers", type=int, dest="n_consumers", help="consumers per grid cell in sample mode")


def build_parser():
    ap = argparse.ArgumentParser(prog="microid", description="Simulate markets and run the demand identification pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "draw markets and CCP surfaces"),
                       ("recover-index", "match markets, chain Jacobians, certify common CCPs"),
                       ("recover-shocks", "series IV for the demand shocks, then conditional demand if configured"),
                       ("nested-logit", "semiparametric nested logit estimates"),
                       ("full", "every stage listed in the config")):
        _run_args(sub.add_parser(name, help=text))
    d = sub.add_parser("dsep", help="d-separation queries on a causal graph")
    d.add_argument("graph", nargs="?", help="edge-list file")
    d.add_argument("--query", help='e.g. "W _||_ Xi | X" (default: audit the labelled instrument)')
    d.add_argument("--figures", action="store_true", help="run the built-in figure table")
    d.add_argument("--json", dest="json_out", help="write verdicts as JSON")
    r = sub.add_parser("report", help="print the checks stored in a run directory")
    r.add_argument("--out", help="run directory")
    r.add_argument("--config", help="config whose output directory to read")
    sub.add_parser("configs", help="list bundled configs")
    return ap


def _config(args):
    cfg = load_config(args.config)
    for k in ("seed", "out", "mode", "n_consumers"):
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    cfg.__post_init__()
    return cfg


def _cmd_run(args):
    cfg = _config(args)
    stages = None if args.command == "full" else [s for s in STAGE_OF[args.command]
                                                  if s in cfg.stages or s == STAGE_OF[args.command][0]]
    report = run_stages(cfg, stages)
    ran = cfg.ordered_stages() if stages is None else stages
    for line in summarize({"stages": {s: report["stages"][s] for s in ran}}):
        print(line)
    ok = all(report["stages"][s]["passed"] for s in ran)
    print(f"report: {Path(cfg.out) / 'report.json'}")
    return 0 if ok else 1


def _cmd_dsep(args):
    out = {}
    ok = True
    if args.figures:
        rows = causal.golden_table()
        for r in rows:
            tag = "match" if r["match"] else "MISMATCH"
            wit = f"  [{r['witness']}]" if r["witness"] else ""
            print(f"{r['name']:<16} expected {r['expected']:<5} computed {r['computed']:<5} {tag}{wit}")
        n = sum(r["match"] for r in rows)
        print(f"{n}/{len(rows)} figure verdicts match")
        ok = n == len(rows)
        out["figures"] = rows
    if args.graph:
        g = causal.load_dag(args.graph)
        v = causal.d_separated(g, *causal.parse_query(args.query)) if args.query else causal.audit_instrument(g)
        print(v)
        out["query"] = v.to_dict()
    elif not args.figures:
        raise ParseError("give a graph file or --figures")
    if args.json_out:
        causal.dump_json(out, args.json_out)
    return 0 if ok else 1


def _cmd_report(args):
    if args.out:
        root = Path(args.out)
    elif args.config:
        root = Path(load_config(args.config).out)
    else:
        raise ConfigInvalid("report needs --out or --config")
    path = root / "report.json"
    if not path.exists():
        raise MicroIdError(f"no report at {path}")
    with open(path) as fh:
        report = json.load(fh)
    for line in summarize(report):
        print(line)
    print("overall:", "PASS" if report.get("passed") else "FAIL")
    return 0 if report.get("passed") else 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "dsep":
            return _cmd_dsep(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "configs":
            print("\n".join(bundled_configs()))
            return 0
        return _cmd_run(args)
    except (ConfigInvalid, ParseError, StageError, MicroIdError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
