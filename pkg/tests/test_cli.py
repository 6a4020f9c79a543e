import csv
import hashlib
import json

import pytest
import yaml

from gridcl.cli import main
from gridcl.experiment import (
    OrchestrationError,
    ReportError,
    RunConfig,
    atomic_write,
    expand_methods,
    load_results,
    run_batch,
    summarize,
    write_tables,
)
from gridcl.strategies import METHODS

TINY = {
    "data": {"synthetic": {"rows_per_cell": 24}},
    "strategy": {"epochs": 1, "hidden": 4, "buffer_size": 12, "fisher_samples": 8},
    "scenarios": [4],
    "seeds": [0],
}


def tiny_config(tmp_path, **changes):
    data = {**TINY, "output_dir": str(tmp_path / "out"), **changes}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_generate(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert main(["generate", str(out), "--rows-per-cell", "12"]) == 0
    text = capsys.readouterr().out
    assert "fault_type=10 zone=3: 12" in text
    first = hashlib.sha256(out.read_bytes()).hexdigest()
    main(["generate", str(out), "--rows-per-cell", "12"])
    assert hashlib.sha256(out.read_bytes()).hexdigest() == first


def test_generate_unwritable(tmp_path, capsys):
    assert main(["generate", str(tmp_path / "missing" / "d.csv"), "--rows-per-cell", "12"]) == 2


def test_all_expands_to_eight_methods():
    assert expand_methods("all") == list(METHODS) and len(METHODS) == 8
    assert expand_methods(["proder", "joint"]) == ["joint", "proder"]
    with pytest.raises(ValueError):
        expand_methods("sgd")


def test_unknown_strategy_field_rejected():
    with pytest.raises(ValueError, match="unknown strategy"):
        RunConfig.from_dict({"strategy": {"lrr": 1}})


def test_run_without_joint_is_an_orchestration_error(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--method", "finetune"]) == 3
    assert "joint" in capsys.readouterr().err.lower()


def test_run_then_report(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--method", "joint", "--method", "er"]) == 0
    files = sorted(p.name for p in (out / "runs").iterdir())
    assert files == ["s4_er_seed0.json", "s4_joint_seed0.json"]
    table = read_csv(out / "table_scenario4.csv")
    assert table[0] == ["method", "ACC", "gap", "n_seeds", "best"]
    assert [r[0] for r in table[1:]] == ["joint", "er"]
    assert table[1][2] == "0.000000"
    # a later run can reuse the cached Joint baseline for its gap
    assert main(["run", "--config", str(cfg), "--method", "proder"]) == 0
    res = json.loads((out / "runs" / "s4_proder_seed0.json").read_text())
    joint = json.loads((out / "runs" / "s4_joint_seed0.json").read_text())
    assert res["joint_acc"] == joint["final_acc"]
    assert res["gap"] == joint["final_acc"] - res["final_acc"]
    # four zone prototypes of width 2*hidden, float32
    assert res["memory"]["prototype_bytes"] == 4 * 8 * 4
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "proder" in capsys.readouterr().out


def test_report_flags_inconsistent_configs(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = tiny_config(tmp_path, methods=["joint", "er"], seeds=[0])
    main(["run", "--config", str(cfg)])
    assert main(["run", "--config", str(cfg), "--seed", "1", "--set", "lr=0.01"]) == 0
    assert main(["report", str(out)]) == 4
    assert "different strategy settings" in capsys.readouterr().err


def test_report_on_empty_dir(tmp_path):
    assert main(["report", str(tmp_path)]) == 4


def test_best_flag_marks_ties(tmp_path):
    from gridcl.metrics import RunResult

    def res(method, acc):
        return RunResult(method, 1, 0, [[acc]], [1], acc, 0.0, acc, {}, 0.0, {"resolved_strategy": {}, "data": {}})

    written = write_tables(tmp_path, [res("joint", 0.5), res("er", 0.5), res("finetune", 0.2)])
    rows = read_csv(tmp_path / "table_scenario1.csv")
    assert [r[4] for r in rows[1:]] == ["*", "", "*"]
    assert tmp_path / "summary_grid.csv" in written


def test_aggregates_are_byte_identical_across_reruns(tmp_path):
    digests = []
    for name in ("a", "b"):
        cfg = RunConfig.from_dict({**TINY, "methods": ["joint", "finetune", "derpp"], "output_dir": str(tmp_path / name)})
        run_batch(cfg)
        digests.append({p.name: p.read_bytes() for p in (tmp_path / name).glob("*.csv")})
    assert digests[0] == digests[1] and len(digests[0]) == 3


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "x" / "f.txt", "hello")
    assert [p.name for p in (tmp_path / "x").iterdir()] == ["f.txt"]


def test_sweep(tmp_path, capsys):
    cfg = tiny_config(tmp_path, methods=["joint", "er"])
    assert main(["sweep", "--config", str(cfg), "--grid", "replay_ratio=0.25,0.5"]) == 0
    out = tmp_path / "out"
    assert {p.name for p in out.iterdir()} == {"replay_ratio-0.25", "replay_ratio-0.5"}
    r = load_results(out / "replay_ratio-0.25")
    assert {x.method for x in r} == {"joint", "er"}
    assert summarize(r)[4]["er"]["acc"] >= 0


def test_csv_source_matches_in_memory_synthetic(tmp_path):
    data = tmp_path / "d.csv"
    main(["generate", str(data), "--rows-per-cell", "24"])
    cfg = tiny_config(tmp_path, methods=["joint"])
    assert main(["run", "--config", str(cfg), "--csv", str(data), "--out", str(tmp_path / "csv")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "mem")]) == 0
    a, b = (json.loads((tmp_path / d / "runs" / "s4_joint_seed0.json").read_text()) for d in ("csv", "mem"))
    assert a["dataset_digest"] == b["dataset_digest"]
    assert a["accuracy_matrix"] == b["accuracy_matrix"]


def test_report_error_type():
    with pytest.raises(ReportError):
        write_tables(".", [])
    assert issubclass(OrchestrationError, RuntimeError)
