from __future__ import annotations

import os
import subprocess
import sys

import pytest

from pflfe.cli import main


def test_compare_needs_two_protocols(tiny_config, tmp_path, capsys):
    assert main(["compare", "--config", tiny_config, "--protocol", "pflfe", "--out", str(tmp_path)]) == 1
    assert "at least two" in capsys.readouterr().err


def test_missing_config_exit_code(capsys):
    assert main(["run", "--config", "/no/such.toml"]) == 1
    assert "/no/such.toml" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["run"],
    ["frobnicate"],
    ["run", "--config", "bench5", "--protocol", "fedprox"],
    ["run", "--config", "bench5", "--protocol", "pflfe,fedavg"],
    ["run", "--config", "bench5", "--rounds", "0"],
    ["run", "--config", "bench5", "--threads", "0"],
    ["gradcheck", "--seeds", "0"],
])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_run_writes_reports(tiny_config, tmp_path, capsys):
    assert main(["-q", "run", "--config", tiny_config, "--rounds", "1", "--out", str(tmp_path)]) == 0
    names = sorted(os.listdir(tmp_path / "pflfe" / "seed_3"))
    assert names == sorted(["metrics.csv", "comm.csv", "kl.csv", "embeddings.tsv", "curves.csv"])
    assert (tmp_path / "summary.csv").exists()
    assert "dice_acli=" in capsys.readouterr().out


def test_env_overrides_out(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("PFLFE_OUT", str(tmp_path / "env"))
    assert main(["-q", "run", "--config", tiny_config, "--rounds", "1", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "summary.csv").exists() and not (tmp_path / "flag").exists()


def test_runtime_error_exit_two(tiny_config, tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["-q", "run", "--config", tiny_config, "--rounds", "1", "--out", str(blocker)]) == 2
    assert "runtime error" in capsys.readouterr().err


def test_domain_adapt_and_ablate(tiny_config, tmp_path):
    assert main(["-q", "domain-adapt", "--config", tiny_config, "--out", str(tmp_path)]) == 0
    text = (tmp_path / "domain_adapt.csv").read_text().splitlines()
    assert text[0].startswith("protocol,seed,held_out") and len(text) == 1 + 2 * 3
    rows = [line.split(",") for line in text[1:]]
    assert all(r[4] == "true" and r[6] == "true" for r in rows)
    assert main(["-q", "ablate", "--config", tiny_config, "--rounds", "1", "--out", str(tmp_path / "ab")]) == 0
    assert (tmp_path / "ab" / "ablation.csv").exists()


def test_gradcheck_fault_injection_exit_codes():
    ok = subprocess.run([sys.executable, "-m", "pflfe", "gradcheck", "--seeds", "2"], capture_output=True, text=True)
    assert ok.returncode == 0, ok.stdout
    bad = subprocess.run([sys.executable, "-m", "pflfe", "gradcheck", "--seeds", "2", "--inject-fault"],
                         capture_output=True, text=True)
    assert bad.returncode == 1 and "FAIL" in bad.stdout
