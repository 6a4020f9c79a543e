"""Run configuration, per-cell execution, result files and aggregate tables."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import numcore as nc
from .data import (
    DatasetSplit,
    SampleRows,
    Scenario,
    SyntheticConfig,
    WindowSet,
    build_scenario,
    generate_synthetic,
    load_csv,
    prepare_split,
)
from .metrics import AccuracyMatrix, RunResult, compute_gap, evaluate_full, evaluate_row
from .model import BiGruClassifier
from .replay import buffer_memory
from .strategies import METHODS, Adam, StrategyConfig, make_strategy, run_rngs, train_task

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
OUTPUT_ENV = "GRIDCL_OUTPUT"
FULL_TRAIN_WINDOWS = 1496

FAST_PRESET = {"rows_per_cell": 66, "epochs": 15, "buffer_size": 75}


class OrchestrationError(RuntimeError):
    pass


class ReportError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce a batch of (scenario, method, seed) cells."""

    source: str = "synthetic"  # "synthetic" or "csv"
    csv_path: str | None = None
    synthetic: dict = field(default_factory=dict)
    train_fraction: float = 0.8
    scenarios: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seeds: list[int] = field(default_factory=lambda: [0])
    strategy: dict = field(default_factory=dict)
    scenario_overrides: dict = field(default_factory=dict)
    output_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_ENV, "results"))
    fast: bool = False
    version: int = CONFIG_VERSION

    def __post_init__(self):
        self.methods = expand_methods(self.methods)
        self.scenarios = [int(s) for s in self.scenarios]
        self.seeds = [int(s) for s in self.seeds]
        self.scenario_overrides = {int(k): dict(v) for k, v in (self.scenario_overrides or {}).items()}
        unknown = set(self.strategy) - set(StrategyConfig.field_names())
        if unknown:
            raise ValueError(f"unknown strategy fields: {sorted(unknown)}")
        if self.source not in ("synthetic", "csv"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ValueError("csv source needs csv_path")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data or {})
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
        dsec = data.pop("data", None)
        if dsec:
            data.setdefault("source", dsec.get("source", "synthetic"))
            if "csv" in dsec:
                data.setdefault("csv_path", dsec["csv"])
            data.setdefault("synthetic", dsec.get("synthetic", {}))
            if "train_fraction" in dsec:
                data.setdefault("train_fraction", dsec["train_fraction"])
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "data": {
                "source": self.source,
                **({"csv": self.csv_path} if self.csv_path else {}),
                "synthetic": dict(self.synthetic),
                "train_fraction": self.train_fraction,
            },
            "scenarios": list(self.scenarios),
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "strategy": dict(self.strategy),
            "scenario_overrides": {k: dict(v) for k, v in self.scenario_overrides.items()},
            "output_dir": self.output_dir,
            "fast": self.fast,
        }

    # ------------------------------------------------------------------
    def synthetic_config(self) -> SyntheticConfig:
        params = dict(self.synthetic)
        if self.fast:
            params.setdefault("rows_per_cell", FAST_PRESET["rows_per_cell"])
        return SyntheticConfig(**params)

    def strategy_config(self, scenario_id: int, method: str) -> StrategyConfig:
        params = {}
        if self.fast:
            params.update(epochs=FAST_PRESET["epochs"], buffer_size=FAST_PRESET["buffer_size"])
        params.update(self.strategy)
        params.update(self.scenario_overrides.get(scenario_id, {}))
        params["method"] = method
        return StrategyConfig.for_scenario(scenario_id, **params)


def expand_methods(methods) -> list[str]:
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    out: list[str] = []
    for m in methods:
        for name in METHODS if m == "all" else [m]:
            if name not in METHODS:
                raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)} or 'all'")
            if name not in out:
                out.append(name)
    # Joint first so the gap reference exists before other cells
    return sorted(out, key=lambda m: METHODS.index(m))


def load_rows(config: RunConfig) -> SampleRows:
    if config.source == "csv":
        return load_csv(config.csv_path)
    return generate_synthetic(config.synthetic_config())


# ----------------------------------------------------------------------
# single cell
# ----------------------------------------------------------------------


def run_cell(
    scenario: Scenario,
    cfg: StrategyConfig,
    seed: int,
    joint_acc: float | None = None,
    dataset_digest: str = "",
    config_echo: dict | None = None,
) -> RunResult:
    plan = scenario.plan
    target = plan.target
    rngs = run_rngs(seed)
    t0 = time.perf_counter()
    n_features = scenario.train.x.shape[2]
    window = scenario.train.x.shape[1]
    sizes = [len(ws) for ws in scenario.test_streams]
    matrix = AccuracyMatrix(sizes=sizes)
    with nc.precision(np.float32):
        strategy = make_strategy(cfg, rngs)
        if cfg.method == "joint":
            model = BiGruClassifier(n_features, plan.n_classes, rngs["init"], cfg.hidden, cfg.dropout, window)
            opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            train_task(model, scenario.train, scenario.train.labels(target), strategy, opt, 0, rngs)
            row = evaluate_row(model, scenario.test_streams, target, len(plan.tasks) - 1)
            for t in range(len(plan.tasks)):
                matrix.add_row(row[: t + 1])
        else:
            first = plan.classes_through(0)
            model = BiGruClassifier(n_features, max(first) + 1, rngs["init"], cfg.hidden, cfg.dropout, window)
            opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            for t in range(len(plan.tasks)):
                model.ensure_classes(max(plan.classes_through(t)) + 1)
                if cfg.method == "cumulative":
                    stream = WindowSet.concat(scenario.train_streams[: t + 1])
                else:
                    stream = scenario.train_streams[t]
                log.info("scenario %d %s seed %d: task %d/%d (%d windows)", plan.scenario_id, cfg.method, seed, t + 1, len(plan.tasks), len(stream))
                train_task(model, stream, stream.labels(target), strategy, opt, t, rngs)
                matrix.add_row(evaluate_row(model, scenario.test_streams, target, t))
        final = evaluate_full(model, scenario.test.x, scenario.test.labels(target))
    if cfg.method == "joint":
        joint_acc = final
    memory = buffer_memory(strategy.buffer, strategy.prototype_count(), model.feature_dim).as_dict()
    return RunResult(
        method=cfg.method,
        scenario=plan.scenario_id,
        seed=seed,
        accuracy_matrix=matrix.rows,
        task_test_sizes=sizes,
        final_acc=final,
        gap=None if joint_acc is None else compute_gap(final, joint_acc),
        joint_acc=joint_acc,
        memory=memory,
        wall_clock_s=round(time.perf_counter() - t0, 3),
        config=config_echo if config_echo is not None else cfg.as_dict(),
        dataset_digest=dataset_digest,
    )


# ----------------------------------------------------------------------
# batch execution
# ----------------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def joint_key(digest: str, scenario_id: int, seed: int, cfg: StrategyConfig) -> str:
    train_part = {k: v for k, v in cfg.as_dict().items() if k in ("epochs", "batch_size", "lr", "beta1", "beta2", "adam_eps", "hidden", "dropout")}
    return f"{digest}_s{scenario_id}_seed{seed}_{_hash(train_part)}"


def result_path(out: Path, scenario_id: int, method: str, seed: int) -> Path:
    return out / "runs" / f"s{scenario_id}_{method}_seed{seed}.json"


def cell_echo(config: RunConfig, scenario_id: int, method: str, seed: int, cfg: StrategyConfig) -> dict:
    """Config echo sufficient to re-run exactly this cell."""
    echo = config.to_dict()
    echo.update(scenarios=[scenario_id], methods=[method], seeds=[seed])
    echo["resolved_strategy"] = cfg.as_dict()
    if config.source == "synthetic":
        echo["data"]["synthetic"] = dict(config.synthetic_config().__dict__)
    return echo


def run_batch(config: RunConfig, progress=None) -> list[RunResult]:
    """Execute every requested cell, writing one JSON per cell plus aggregate tables."""
    out = Path(config.output_dir)
    rows = load_rows(config)
    digest = rows.digest()
    results = []
    splits: dict[int, DatasetSplit] = {}
    for seed in config.seeds:
        splits[seed] = prepare_split(rows, seed, config.train_fraction)
    for sid in config.scenarios:
        for seed in config.seeds:
            scenario = build_scenario(splits[seed], sid)
            joint_acc = None
            for method in config.methods:
                cfg = config.strategy_config(sid, method)
                jkey = joint_key(digest, sid, seed, config.strategy_config(sid, "joint"))
                jpath = out / "joint_cache" / f"{jkey}.json"
                if method != "joint" and joint_acc is None:
                    if not jpath.exists():
                        raise OrchestrationError(
                            f"no Joint baseline for scenario {sid}, seed {seed}; run with --method joint first "
                            f"(or include joint in the method list)"
                        )
                    joint_acc = RunResult.from_json(jpath.read_text()).final_acc
                res = run_cell(scenario, cfg, seed, joint_acc, digest, cell_echo(config, sid, method, seed, cfg))
                if method == "joint":
                    joint_acc = res.final_acc
                    atomic_write(jpath, res.to_json())
                atomic_write(result_path(out, sid, method, seed), res.to_json())
                results.append(res)
                if progress:
                    progress(res)
    try:
        write_tables(out, load_results(out))
    except ReportError as exc:
        # cell files are already on disk; `report` surfaces the conflict
        log.warning("aggregate tables not refreshed: %s", exc)
    return results


# ----------------------------------------------------------------------
# aggregation
# ----------------------------------------------------------------------


def load_results(out) -> list[RunResult]:
    runs = Path(out) / "runs"
    if not runs.is_dir():
        return []
    return [RunResult.from_json(p.read_text()) for p in sorted(runs.glob("*.json"))]


def _check_consistent(results: list[RunResult]) -> None:
    """Cells that will be averaged together must share data and method settings."""
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.scenario, r.method), []).append(r)
    conflicts = []
    for (sid, m), rs in groups.items():
        ref = rs[0]
        for r in rs[1:]:
            if r.config.get("resolved_strategy") != ref.config.get("resolved_strategy"):
                conflicts.append(f"scenario {sid} {m}: seeds {ref.seed} and {r.seed} use different strategy settings")
            if r.config.get("data") != ref.config.get("data"):
                conflicts.append(f"scenario {sid} {m}: seeds {ref.seed} and {r.seed} use different data settings")
    digests = {r.dataset_digest for r in results}
    if len(digests) > 1:
        conflicts.append(f"results come from {len(digests)} different datasets: {sorted(digests)}")
    if conflicts:
        raise ReportError("inconsistent results:\n  " + "\n  ".join(conflicts))


def _fmt(v: float | None) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def summarize(results: list[RunResult]) -> dict:
    """Per (scenario, method): mean ACC and gap over seeds plus mean per-task curves."""
    _check_consistent(results)
    table: dict[int, dict[str, dict]] = {}
    for r in results:
        cell = table.setdefault(r.scenario, {}).setdefault(r.method, {"acc": [], "gap": [], "curve": [], "seeds": []})
        cell["acc"].append(r.final_acc)
        cell["gap"].append(r.gap)
        cell["seeds"].append(r.seed)
        m = r.matrix()
        cell["curve"].append([m.seen_accuracy(t) for t in range(m.n_tasks)])
    summary: dict[int, dict[str, dict]] = {}
    for sid in sorted(table):
        summary[sid] = {}
        for method in sorted(table[sid], key=METHODS.index):
            c = table[sid][method]
            gaps = [g for g in c["gap"] if g is not None]
            summary[sid][method] = {
                "acc": float(np.mean(c["acc"])),
                "gap": float(np.mean(gaps)) if len(gaps) == len(c["gap"]) else None,
                "seeds": sorted(c["seeds"]),
                "curve": [float(v) for v in np.mean(np.asarray(c["curve"], dtype=np.float64), axis=0)],
            }
    return summary


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_tables(out, results: list[RunResult]) -> list[Path]:
    """Write per-scenario tables, the ACC/gap grid and per-task curves."""
    if not results:
        raise ReportError("no results to report")
    out = Path(out)
    summary = summarize(results)
    written = []
    grid_rows = []
    for sid, methods in summary.items():
        best = max(v["acc"] for v in methods.values())
        rows = []
        for method, v in methods.items():
            flag = "*" if v["acc"] == best else ""
            rows.append([method, _fmt(v["acc"]), _fmt(v["gap"]), len(v["seeds"]), flag])
            grid_rows.append([sid, method, _fmt(v["acc"]), _fmt(v["gap"]), len(v["seeds"]), flag])
        p = out / f"table_scenario{sid}.csv"
        atomic_write(p, _csv_text(["method", "ACC", "gap", "n_seeds", "best"], rows))
        written.append(p)
        curve_methods = list(methods)
        n_tasks = max(len(v["curve"]) for v in methods.values())
        crow = []
        for t in range(n_tasks):
            crow.append([t + 1] + [_fmt(methods[m]["curve"][t]) if t < len(methods[m]["curve"]) else "" for m in curve_methods])
        p = out / f"curves_scenario{sid}.csv"
        atomic_write(p, _csv_text(["task"] + curve_methods, crow))
        written.append(p)
    p = out / "summary_grid.csv"
    atomic_write(p, _csv_text(["scenario", "method", "ACC", "gap", "n_seeds", "best"], grid_rows))
    written.append(p)
    return written
