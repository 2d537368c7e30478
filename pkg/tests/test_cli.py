import json

import pytest

from augserve.cli import EXIT_INFEASIBLE, EXIT_INVALID, main
from augserve.workload import WORKED_EXAMPLE_PATH


def test_example_command(capsys):
    assert main(["example"]) == 0
    out = capsys.readouterr().out
    assert "35/3" in out and "31/3" in out
    assert out.splitlines()[3].startswith("lamps") and " 10 " in out.splitlines()[3]


def test_simulate_and_compare(tmp_path, capsys):
    runs = tmp_path / "runs"
    args = ["simulate", "--synthetic", "infercept", "--n", "40", "--rate", "2", "--max-apis", "2",
            "--policy", "fcfs,lamps", "--memory-budget", "2048", "--out", str(runs), "--csv", str(tmp_path / "c.csv")]
    assert main(args) == 0
    assert sorted(p.name for p in runs.iterdir()) == ["fcfs.json", "lamps.json"]
    assert (tmp_path / "c.csv").read_text().startswith("policy,")
    capsys.readouterr()
    assert main(["compare", str(runs / "lamps.json"), str(runs / "fcfs.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in lines[1:]] == ["fcfs", "lamps"]


def test_single_report_and_event_log(tmp_path):
    out, log = tmp_path / "r.json", tmp_path / "ev.jsonl"
    code = main(["simulate", "--trace", str(WORKED_EXAMPLE_PATH), "--unit-mode", "--policy", "sjf",
                 "--memory-budget", "6", "--max-batch-size", "1", "--out", str(out), "--event-log", str(log)])
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["policy"] == "sjf" and rep["aggregates"]["completed"] == 3
    assert log.read_text().count("\n") > 10


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synthetic": "toolbench", "n": 20, "policy": "sjf", "memory-budget": 5000,
                               "starvation_threshold": "inf"}))
    out = tmp_path / "r.json"
    assert main(["simulate", "--config", str(cfg), "--policy", "fcfs", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["policy"] == "fcfs"
    assert rep["config"]["scheduler"]["memory_budget"] == 5000
    assert rep["config"]["scheduler"]["starvation_threshold"] is None


@pytest.mark.parametrize("argv", [
    ["simulate"],
    ["simulate", "--synthetic", "nope"],
    ["simulate", "--synthetic", "toolbench", "--policy", "lifo"],
    ["simulate", "--synthetic", "toolbench", "--rate", "0"],
    ["simulate", "--synthetic", "toolbench", "--starvation-threshold", "0"],
])
def test_invalid_input_exit_code(argv, capsys):
    assert main(argv) == EXIT_INVALID
    assert "error:" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"colour": "blue"}')
    assert main(["simulate", "--config", str(cfg)]) == EXIT_INVALID


def test_infeasible_budget_exit_code():
    assert main(["simulate", "--synthetic", "toolbench", "--n", "5", "--memory-budget", "4"]) == EXIT_INFEASIBLE


def test_compare_mismatched_traces(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["simulate", "--synthetic", "toolbench", "--n", "5", "--seed", "1", "--policy", "fcfs", "--out", str(a)])
    main(["simulate", "--synthetic", "toolbench", "--n", "5", "--seed", "2", "--policy", "lamps", "--out", str(b)])
    assert main(["compare", str(a), str(b)]) == EXIT_INVALID
