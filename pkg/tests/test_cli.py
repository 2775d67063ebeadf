from __future__ import annotations

import json
from pathlib import Path

import pytest

from hskinetic.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

REC = """
seed = 7
[recollide]
epsilon_grid = [0.1, 0.05, 0.025]
t = 1.0
ensemble_sizes = [20000]
[recollide.domain]
kind = "free"
[recollide.h]
kind = "bump"
params = { center = [0.0, 0.0, 0.0], radius = 0.5 }
[recollide.options]
n_max = 3
"""


@pytest.mark.parametrize("command", ["sample", "evolve", "series"])
def test_run_commands(command, tmp_path):
    out = tmp_path / command
    code = main([command, "--config", str(CONFIGS / "example.toml"), "--out", str(out), "--threads", "1"])
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == command and man["seed"] == 1
    assert all(Path(f).exists() for f in man["outputs"])
    assert code == (0 if man["passed"] else 1)


def test_json_format(tmp_path):
    main(["evolve", "--config", str(CONFIGS / "example.toml"), "--out", str(tmp_path), "--format", "json",
          "--seed", "4", "--threads", "1"])
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 4 and man["outputs"][0].endswith("trajectory.json")


def test_scan_verdicts_and_exit_code(tmp_path, capsys):
    cfg = tmp_path / "rec.toml"
    cfg.write_text(REC)
    code = main(["scan-recollide", "--config", str(cfg), "--out", str(tmp_path / "o"), "--threads", "1"])
    printed = capsys.readouterr().out
    assert "recollide.internal_slope" in printed
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["seed"] == 7 and len(man["config_sha256"]) == 64
    assert code == (0 if man["passed"] else 1)
    # a slope window that cannot hold makes the run fail
    cfg.write_text(REC + "internal_slope_range = [3.0, 4.0]\n")
    assert main(["scan-recollide", "--config", str(cfg), "--out", str(tmp_path / "p"), "--threads", "1"]) == 1
