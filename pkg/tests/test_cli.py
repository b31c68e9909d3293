import json
import subprocess
import sys
from pathlib import Path

import pytest

from redkit.cli import main

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml")


def test_cli_workflow(tmp_path, capsys):
    data = str(tmp_path / "d.reds")
    ckpt = str(tmp_path / "m.ckpt")
    assert main(["gen-data", SMOKE, "-o", data]) == 0
    assert main(["train", SMOKE, "--data", data, "-o", ckpt]) == 0
    assert main(["detect", "--ckpt", ckpt, "--data", data, "--lambda", "0.3",
                 "-o", str(tmp_path / "v.json")]) == 0
    verdicts = json.loads((tmp_path / "v.json").read_text())
    assert verdicts["summary"]["lambda"] == 0.3 and len(verdicts["verdicts"]) == 36
    report = tmp_path / "r.json"
    assert main(["eval", "--ckpt", ckpt, "--data", data, "--snr-list", "0,20,30",
                 "-o", str(report)]) == 0
    assert len(json.loads(report.read_text())["results"]) == 3
    assert (tmp_path / "r_roc_snr20.csv").exists()


def test_cli_error_exit_code(tmp_path, capsys):
    code = main(["detect", "--ckpt", str(tmp_path / "missing"), "--data", "x", "--lambda", "1"])
    assert code != 0
    assert "error" in capsys.readouterr().err


def test_cli_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\ntrain:\n  lamda: 1\n")
    assert main(["gen-data", str(bad), "-o", str(tmp_path / "d")]) != 0
    assert "unknown" in capsys.readouterr().err


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "redkit.cli", "run", SMOKE, "-o",
                           str(tmp_path / "run")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "AUC" in proc.stdout
    assert (tmp_path / "run" / "manifest.json").exists()


def test_cli_gradcheck_small(capsys):
    assert main(["gradcheck", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 12
