import subprocess
import sys
from pathlib import Path

import pytest

from adaptrules.cli import main

FIXTURES = Path(__file__).parent / "fixtures"
RULES = FIXTURES / "rules"


def test_simulate(tmp_path, capsys):
    assert main(["simulate", "--rules", str(RULES / "better.rules"), "--out", str(tmp_path)]) == 0
    assert "total utility: 617506.72" in capsys.readouterr().out
    assert (tmp_path / "simulation.csv").read_text().startswith("interval,")


def test_baseline(tmp_path, capsys):
    assert main(["baseline", "--out", str(tmp_path)]) == 0
    assert "total utility: 500659.27" in capsys.readouterr().out
    assert (tmp_path / "default.rules").exists()


def test_simulate_with_csv_trace(tmp_path):
    trace = tmp_path / "t.csv"
    trace.write_text("interval,arrival_rate\n0,10\n1,80\n2,20\n")
    assert main(["simulate", "--rules", str(RULES / "eager.rules"), "--trace", str(trace), "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "simulation.csv").read_text().splitlines()) == 4


def test_trace_gen(tmp_path, capsys):
    params = tmp_path / "p.cfg"
    params.write_text("length = 12\nbase = 5\nnoise_std = 1\n")
    out = tmp_path / "sub" / "trace.csv"
    assert main(["trace", "gen", "--params", str(params), "--seed", "3", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 13


def test_check(capsys):
    assert main(["check", "--rules", str(RULES / "better.rules")]) == 0
    assert "ok (2 definitions, 4 rules)" in capsys.readouterr().out
    assert main(["check", "--rules", str(RULES / "broken.rules")]) == 2
    assert "line 2, column 1" in capsys.readouterr().err


def test_optimize_scripted(tmp_path, capsys):
    args = ["optimize", "--optimizer", "scripted", "--iterations", "2", "--out", str(tmp_path),
            "--script", str(RULES / "noop.rules"), "--script", str(RULES / "better.rules")]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "iteration 2: utility 617506.72" in out
    assert (tmp_path / "best.rules").read_text() == (RULES / "better.rules").read_text()
    assert (tmp_path / "knowledge" / "iterations.csv").exists()


def test_optimize_hillclimb(tmp_path, capsys):
    args = ["optimize", "--optimizer", "hillclimb", "--iterations", "3", "--policy", "accept-if-better",
            "--out", str(tmp_path)]
    assert main(args) == 0
    assert "best utility" in capsys.readouterr().out


def test_optimize_llm_replay(tmp_path, capsys):
    args = ["optimize", "--optimizer", "llm", "--iterations", "2", "--mode", "replay",
            "--cassette", str(FIXTURES / "cassettes" / "retry_then_valid.yaml"), "--out", str(tmp_path)]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "iteration 1: utility 617506.72, accepted=True" in out and "llm_calls=3" in out


def test_experiment(tmp_path, capsys):
    config = tmp_path / "exp.cfg"
    config.write_text(
        f"optimizer = scripted\nruns = 2\niterations = 2\nseed = 1\n"
        f"scripts = {RULES / 'better.rules'}, {RULES / 'noop.rules'}\n"
    )
    assert main(["experiment", "--config", str(config), "--out", str(tmp_path / "out")]) == 0
    assert "2 runs x 2 iterations" in capsys.readouterr().out
    assert (tmp_path / "out" / "utility_vs_iteration.svg").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["simulate", "--out", "x"],
    ["optimize", "--optimizer", "genetic", "--out", "x"],
    ["optimize", "--optimizer", "scripted", "--out", "x"],
    ["experiment", "--config", "c", "--out", "o", "--jobs", "many"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as info:
        code = main(argv)
        raise SystemExit(code)
    assert info.value.code == 1


@pytest.mark.parametrize("argv", [
    ["simulate", "--rules", "no/such.rules", "--out", "o"],
    ["simulate", "--rules", str(RULES / "broken.rules"), "--out", "o"],
    ["experiment", "--config", "missing.cfg", "--out", "o"],
    ["optimize", "--optimizer", "llm", "--mode", "replay", "--iterations", "1", "--out", "o"],
])
def test_runtime_errors_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert capsys.readouterr().err.startswith("adaptrules: ")


def test_live_mode_without_key_fails_cleanly(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("LLM_API_KEY", raising=False)
    args = ["optimize", "--optimizer", "llm", "--mode", "live", "--iterations", "1", "--out", str(tmp_path)]
    assert main(args) == 2
    assert "LLM_API_KEY" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "adaptrules.cli", "check", "--rules", str(RULES / "noop.rules")],
        capture_output=True, text=True, cwd=tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "adaptrules.cli", "simulate"], capture_output=True, text=True)
    assert proc.returncode == 1
