"""The tset command: artifacts, exit codes, and reread paths."""

import json

import pytest
import yaml

from tset.cli import (
    EXIT_CONFIG,
    EXIT_INVARIANT,
    EXIT_OK,
    main,
    run_scenario,
    trust_table,
)
from tset.ledger import Ledger

from conftest import basic_scenario

ARTIFACTS = ["ledger.bin", "state.json", "summary.txt", "trace.log",
             "trust_table.txt"]


@pytest.fixture()
def scenario_file(tmp_path):
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(basic_scenario()))
    return path


def test_run_writes_all_artifacts(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", str(scenario_file), "--out", str(out)])
    assert code == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ARTIFACTS
    stdout = capsys.readouterr().out
    assert "txns_completed: 1" in stdout
    assert f"artifacts written to {out}/" in stdout

    trace = (out / "trace.log").read_text()
    assert trace.startswith("tick\tsender\treceiver")
    summary = (out / "summary.txt").read_text()
    assert summary.startswith("seed: 7\n")
    table = (out / "trust_table.txt").read_text()
    assert table.splitlines()[0].split() \
        == ["merchant", "total", "rejected", "tv", "tf", "grade"]
    state = json.loads((out / "state.json").read_text())
    assert state["accounts"]["merchants"] == {"M0": 15000}
    assert state["summary"]["txns_completed"] == 1
    ledger = Ledger.load(out / "ledger.bin")
    assert ledger.entries[-1].event == "Settled"


def test_rerun_is_byte_identical(scenario_file, tmp_path):
    first = tmp_path / "a"
    second = tmp_path / "b"
    run_scenario(scenario_file, out_dir=first)
    run_scenario(scenario_file, out_dir=second)
    for name in ARTIFACTS:
        assert (first / name).read_bytes() == (second / name).read_bytes(), \
            name


def test_seed_override_changes_artifacts(scenario_file, tmp_path):
    base = tmp_path / "a"
    other = tmp_path / "b"
    run_scenario(scenario_file, out_dir=base)
    result, _ = run_scenario(scenario_file, seed=8, out_dir=other)
    assert result.summary["seed"] == 8
    assert (base / "trace.log").read_bytes() \
        != (other / "trace.log").read_bytes()
    state = json.loads((other / "state.json").read_text())
    assert state["seed"] == 8


def test_ticks_override_truncates(scenario_file, tmp_path, capsys):
    code = main(["run", str(scenario_file), "--ticks", "3",
                 "--out", str(tmp_path / "out")])
    assert code == EXIT_OK
    assert "tick_limit_exceeded: True" in capsys.readouterr().out


def test_run_missing_scenario(tmp_path, capsys):
    code = main(["run", str(tmp_path / "nope.yaml"),
                 "--out", str(tmp_path / "out")])
    assert code == EXIT_CONFIG
    assert "scenario error" in capsys.readouterr().err


def test_run_invalid_scenario(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(basic_scenario(colour="red")))
    code = main(["run", str(bad), "--out", str(tmp_path / "out")])
    assert code == EXIT_CONFIG
    assert "scenario.colour" in capsys.readouterr().err


def test_trust_table_accepts_dir_and_file(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    run_scenario(scenario_file, out_dir=out)
    assert main(["trust-table", str(out)]) == EXIT_OK
    from_dir = capsys.readouterr().out
    assert main(["trust-table", str(out / "state.json")]) == EXIT_OK
    assert capsys.readouterr().out == from_dir
    assert from_dir == trust_table(out)
    assert "M0" in from_dir


def test_trust_table_missing_state(tmp_path, capsys):
    assert main(["trust-table", str(tmp_path)]) == EXIT_CONFIG
    assert "cannot read state" in capsys.readouterr().err


def test_dispute_prints_transaction_history(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    run_scenario(scenario_file, out_dir=out)
    assert main(["dispute", str(out), "--txn", "C0-1"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["txn"] == "C0-1"
    assert report["chain_length"] == 6
    ledger = Ledger.load(out / "ledger.bin")
    assert report["chain_head"] == ledger.head.hex()
    assert [row["event"] for row in report["entries"]] \
        == ["Deposit", "TempAck", "Dispatch", "Accept", "Release", "Settled"]


def test_dispute_unknown_txn(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    run_scenario(scenario_file, out_dir=out)
    assert main(["dispute", str(out), "--txn", "C9-9"]) == EXIT_CONFIG
    assert "dispute error" in capsys.readouterr().err


def test_dispute_corrupted_ledger(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    run_scenario(scenario_file, out_dir=out)
    blob = bytearray((out / "ledger.bin").read_bytes())
    blob[len(blob) // 2] ^= 0x01
    (out / "ledger.bin").write_bytes(bytes(blob))
    assert main(["dispute", str(out), "--txn", "C0-1"]) == EXIT_INVARIANT
    assert "integrity" in capsys.readouterr().err


def test_dispute_missing_ledger(tmp_path, capsys):
    assert main(["dispute", str(tmp_path), "--txn", "C0-1"]) == EXIT_CONFIG
    assert "cannot read ledger" in capsys.readouterr().err


def test_console_script_is_wired():
    import importlib.metadata as md
    eps = md.entry_points(group="console_scripts")
    ours = [ep for ep in eps if ep.name == "tset"]
    assert ours and ours[0].value == "tset.cli:main"
