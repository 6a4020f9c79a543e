"""Command-line entry point: generate, run, report, sweep."""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

import yaml

from .data import SyntheticConfig, cell_counts, generate_synthetic, save_csv
from .experiment import (
    OrchestrationError,
    ReportError,
    RunConfig,
    load_results,
    run_batch,
    summarize,
    write_tables,
)


def _parse_value(text: str):
    return yaml.safe_load(text)


def _base_config(args) -> RunConfig:
    data = yaml.safe_load(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    data = data or {}
    if getattr(args, "csv", None):
        data.setdefault("data", {}).update(source="csv", csv=args.csv)
    if getattr(args, "scenario", None):
        data["scenarios"] = args.scenario
    if getattr(args, "method", None):
        data["methods"] = ",".join(args.method)
    if getattr(args, "seed", None) is not None and args.seed:
        data["seeds"] = args.seed
    if getattr(args, "out", None):
        data["output_dir"] = args.out
    if getattr(args, "fast", False):
        data["fast"] = True
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        data.setdefault("strategy", {})[key] = _parse_value(value)
    return RunConfig.from_dict(data)


def cmd_generate(args) -> int:
    params = {}
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        params.update((loaded.get("data") or {}).get("synthetic", {}))
    if args.rows_per_cell:
        params["rows_per_cell"] = args.rows_per_cell
    if args.data_seed is not None:
        params["seed"] = args.data_seed
    rows = generate_synthetic(SyntheticConfig(**params))
    try:
        save_csv(rows, args.output)
    except OSError as exc:
        print(f"error: cannot write {args.output}: {exc}", file=sys.stderr)
        return 2
    counts = cell_counts(rows)
    print(f"wrote {len(rows)} rows to {args.output}")
    for (f, z), n in sorted(counts.items()):
        print(f"fault_type={f} zone={z}: {n}")
    return 0


def _print_result(res) -> None:
    gap = "n/a" if res.gap is None else f"{res.gap:+.3f}"
    print(f"scenario {res.scenario} {res.method:<10} seed {res.seed}: ACC {res.final_acc:.3f} gap {gap} ({res.wall_clock_s:.0f}s)", flush=True)


def cmd_run(args) -> int:
    config = _base_config(args)
    try:
        run_batch(config, progress=_print_result)
    except OrchestrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"results in {config.output_dir}")
    return 0


def cmd_report(args) -> int:
    results = load_results(args.results)
    try:
        written = write_tables(args.results, results)
        summary = summarize(results)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    for sid, methods in summary.items():
        best = max(v["acc"] for v in methods.values())
        print(f"scenario {sid}")
        for m, v in methods.items():
            gap = "" if v["gap"] is None else f"{v['gap']:.3f}"
            print(f"  {m:<10} ACC {v['acc']:.3f}  gap {gap:>6}{'  *' if v['acc'] == best else ''}")
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_sweep(args) -> int:
    base = _base_config(args)
    grid = []
    for item in args.grid or []:
        key, _, values = item.partition("=")
        grid.append([(key, _parse_value(v)) for v in values.split(",")])
    combos = list(itertools.product(*grid)) if grid else [()]
    root = Path(base.output_dir)
    status = 0
    for combo in combos:
        tag = "_".join(f"{k}-{v}" for k, v in combo) or "base"
        data = base.to_dict()
        data["strategy"] = {**data["strategy"], **dict(combo)}
        data["output_dir"] = str(root / tag)
        cfg = RunConfig.from_dict(data)
        print(f"== sweep point {tag}")
        try:
            run_batch(cfg, progress=_print_result)
        except OrchestrationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            status = 3
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridcl", description="Continual-learning benchmark for grid fault prediction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset CSV")
    g.add_argument("output")
    g.add_argument("--config")
    g.add_argument("--rows-per-cell", type=int)
    g.add_argument("--data-seed", type=int)
    g.set_defaults(func=cmd_generate)

    def run_args(sp):
        sp.add_argument("--config", help="YAML/JSON run config")
        sp.add_argument("--csv", help="use a real dataset CSV instead of synthetic data")
        sp.add_argument("--scenario", type=int, action="append", choices=[1, 2, 3, 4])
        sp.add_argument("--method", action="append", help="method id or 'all' (repeatable)")
        sp.add_argument("--seed", type=int, action="append")
        sp.add_argument("--out", help="output directory (default $GRIDCL_OUTPUT or ./results)")
        sp.add_argument("--fast", action="store_true", help="quarter data, 15 epochs")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a strategy field")

    r = sub.add_parser("run", help="execute (scenario, method, seed) cells")
    run_args(r)
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate result JSONs into tables")
    rep.add_argument("results")
    rep.set_defaults(func=cmd_report)

    sw = sub.add_parser("sweep", help="cartesian sweep over strategy fields")
    run_args(sw)
    sw.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="values to sweep")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
