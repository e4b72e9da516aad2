from __future__ import annotations

import json
import subprocess
import sys

import pytest

from conftest import SCENARIOS, WINE
from dtwin.cli import main

DEFINITION = WINE / "consumer_product.json"


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run-scenario", str(WINE), "--seed", "7", "--out", str(out)]) == 0
    return out


def _flip(path, dest, pick):
    """Copy ``path`` to ``dest`` with one hex digit changed on the line chosen by ``pick``."""
    lines = path.read_text().splitlines()
    n = pick(lines)
    rec = json.loads(lines[n])
    h = rec["block_hash"]
    rec["block_hash"] = ("0" if h[0] != "0" else "1") + h[1:]
    lines[n] = json.dumps(rec, separators=(",", ":"))
    dest.write_text("".join(line + "\n" for line in lines))
    return n


def test_validate_ok_and_invalid(tmp_path, capsys):
    assert main(["validate", str(DEFINITION)]) == 0
    assert "ok (ConsumerProduct" in capsys.readouterr().out
    bad = json.loads(DEFINITION.read_text())
    bad["transitions"][0]["pre"] = ["self.color == input.buyer"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert main(["validate", str(path)]) == 1
    out = capsys.readouterr().out
    assert "INVALID at $.transitions[0].pre[0]" in out and "color" in out
    assert main(["validate", str(tmp_path / "missing.json")]) == 2


def test_run_scenario_prints_assertions(capsys):
    assert main(["run-scenario", str(WINE), "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "LUW purchase: COMMITTED" in out
    assert "FAIL" not in out


def test_fault_file_drives_an_abort(capsys):
    fault = WINE / "faults" / "drop_bank_vote.json"
    assert main(["run-scenario", str(WINE), "--seed", "7", "--fault-plan", str(fault)]) == 0
    assert "LUW purchase: ABORTED" in capsys.readouterr().out


def test_underfunded_scenario_passes_its_own_assertions():
    assert main(["run-scenario", str(SCENARIOS / "wine_purchase_underfunded"), "--seed", "7"]) == 0


def test_bad_scenario_input_exits_two(tmp_path, capsys):
    data = json.loads((WINE / "scenario.json").read_text())
    data["luws"][0]["work"][0]["container"] = "NOWHERE"
    (tmp_path / "scenario.json").write_text(json.dumps(data))
    (tmp_path / "consumer_product.json").write_text(DEFINITION.read_text())
    assert main(["run-scenario", str(tmp_path)]) == 2
    assert "NOWHERE" in capsys.readouterr().err


def test_run_artifacts(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"events.jsonl", "ledger.jsonl", "history.jsonl", "report.txt", "run.json", "containers"} <= names
    assert {p.name for p in (run_dir / "containers").iterdir()} == {
        f"{c}.log.jsonl" for c in ("SHOP", "ERP", "BANK", "LOYALTY")
    }


def test_verify_chain_and_tamper(run_dir, tmp_path, capsys):
    assert main(["verify-chain", str(run_dir / "ledger.jsonl")]) == 0
    assert "chain ok" in capsys.readouterr().out
    tampered = tmp_path / "ledger.jsonl"
    n = _flip(run_dir / "ledger.jsonl", tampered, lambda lines: len(lines) // 2)
    assert main(["verify-chain", str(tampered)]) == 1
    assert f"FAIL block {n}" in capsys.readouterr().out


def test_verify_anchors(run_dir, tmp_path, capsys):
    assert main(["verify-anchors", str(run_dir / "ledger.jsonl"), str(run_dir / "history.jsonl")]) == 0
    assert "anchors ok" in capsys.readouterr().out
    lines = (run_dir / "history.jsonl").read_text().splitlines()
    rec = json.loads(lines[-1])
    rec["receipt"]["salt"] = "00" * 16
    lines[-1] = json.dumps(rec)
    forged = tmp_path / "history.jsonl"
    forged.write_text("\n".join(lines) + "\n")
    assert main(["verify-anchors", str(run_dir / "ledger.jsonl"), str(forged)]) == 1
    assert f"FAIL history line {len(lines)}" in capsys.readouterr().out


def test_replay(run_dir, capsys):
    assert main(["replay", str(run_dir)]) == 0
    assert "replay ok" in capsys.readouterr().out


def test_sweep_and_mutant(capsys):
    assert main(["sweep-faults", str(WINE), "--seed", "7"]) == 0
    assert "PASS" in capsys.readouterr().out
    # only a scenario where some participant votes NO can tell presumed commit apart
    underfunded = str(SCENARIOS / "wine_purchase_underfunded")
    assert main(["sweep-faults", underfunded, "--seed", "7", "--mutate", "presume_commit"]) == 1
    assert "atomicity=2" in capsys.readouterr().out
    assert main(["sweep-faults", str(WINE), "--seed", "7", "--mutate", "skip_prepared_anchor"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_module_entry_point():
    done = subprocess.run(
        [sys.executable, "-m", "dtwin", "validate", str(DEFINITION)], capture_output=True, text=True, check=False
    )
    assert done.returncode == 0, done.stderr
