import json
import subprocess
import sys

import pytest

from billp.harness.cli import main


def run_cli(*argv):
    return main([str(a) for a in argv])


def files_under(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_ingest_and_train_scorer(toy_world, capsys):
    assert run_cli("ingest", "--config", toy_world) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["train"] > 0 and summary["test"] > 0
    assert run_cli("train-scorer", "--config", toy_world) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"train", "test"} and all(v["final_train_rmse"] is not None for v in out.values())


def test_train_then_eval_is_bitwise_reproducible(toy_world, tmp_path, capsys):
    assert run_cli("train", "--config", toy_world, "--seed", 7, "--out", tmp_path / "tr") == 0
    snap = tmp_path / "tr" / "memory"
    before = files_under(snap)
    for run in ("a", "b"):
        assert run_cli("eval", "--config", toy_world, "--seed", 3, "--snapshot", snap, "--out", tmp_path / run) == 0
    assert "Len" in capsys.readouterr().out
    a, b = files_under(tmp_path / "a"), files_under(tmp_path / "b")
    assert a == b and any(k.startswith("report_") for k in a)
    assert files_under(snap) == before


def test_ablate_writes_four_reports(toy_world, tmp_path, capsys):
    cfg = ["--config", toy_world, "--set", "experiment.train_episodes=2", "--set", "experiment.eval_episodes=2", "--set", "experiment.seeds=1"]
    assert run_cli("ablate", *cfg, "--seed", 1, "--out", tmp_path) == 0
    reports = sorted(p.name for p in tmp_path.rglob("report_*.json"))
    assert len(reports) == 4
    assert len(capsys.readouterr().out.strip().splitlines()) == 4
    summary = json.loads((tmp_path / "ablation_summary.json").read_text())
    assert summary["w/o Macro"]["train_memory_writes"]["planner"] == 0


def test_sweep_mc_oracle_and_popularity(toy_world, tmp_path, capsys):
    small = ["--set", "experiment.eval_episodes=2", "--set", "experiment.seeds=1"]
    assert run_cli("sweep", "--config", toy_world, *small, "--seed", 0, "--windows", "1,4", "--out", tmp_path / "sw") == 0
    assert "W=1" in capsys.readouterr().out
    assert run_cli("mc-oracle", "--config", toy_world, "--seed", 0, "--policy", "random", "--n-states", 2, "--n-rollouts", 20, "--out", tmp_path / "mc") == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["states"]) == 2 and all(r["n"] == 20 for r in out["states"])
    traces = next((tmp_path / "sw").rglob("eval_traces_*.jsonl"))
    assert run_cli("popularity", "--config", toy_world, "--traces", f"agent={traces}", "--out", tmp_path / "pop") == 0
    pop = json.loads(capsys.readouterr().out)
    assert abs(sum(pop["recommended_share"]["agent"]) - 1.0) < 1e-9


def test_usage_errors_exit_2(toy_world, tmp_path, capsys):
    assert run_cli("eval", "--config", tmp_path / "missing.toml", "--seed", 0) == 2
    assert "usage:" in capsys.readouterr().err
    assert run_cli("train", "--config", toy_world, "--seed", 0, "--set", "agent.nope=1") == 2
    assert run_cli("popularity", "--config", toy_world) == 2
    for argv in (["frobnicate"], ["train", "--config", str(toy_world)]):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "billp", "eval", "--config", str(tmp_path / "nope.toml"), "--seed", "0"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "usage:" in proc.stderr
