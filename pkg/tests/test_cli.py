"""Command-line interface: every verb, every exit code."""

from __future__ import annotations

import json

import pytest

from mfgchain.bench import CSV_HEADER
from mfgchain.cli import main
from mfgchain.keys import is_address
from mfgchain.trace import read_trace


def _scenario_doc(**over):
    doc = {
        "name": "cli-test",
        "seed": 21,
        "consensus": {
            "mode": "poa",
            "authorities": ["a1", "a2", "a3"],
            "block_period_ms": 500,
        },
        "net": {"latency_ms": [5, 20], "drop_rate": 0.0},
        "genesis": {
            "timestamp_ms": 0,
            "participants": [
                {"name": "vendor", "key_seed": "cli/vendor"},
                {"name": "mill", "key_seed": "cli/mill"},
            ],
        },
        "nodes": [
            {"name": "a1", "role": "authority", "key_seed": "cli/a1"},
            {"name": "a2", "role": "authority", "key_seed": "cli/a2"},
            {"name": "a3", "role": "authority", "key_seed": "cli/a3"},
        ],
        "confirm_depth": 2,
        "duration_ms": 60_000,
        "workload": {
            "mode": "scripted",
            "items": [
                {
                    "at": 100,
                    "node": "a1",
                    "signer": "@vendor",
                    "payload": {
                        "contract": "registry",
                        "method": "add_machine",
                        "args": {
                            "mname": "mill-1",
                            "mac": "@mill",
                            "status": True,
                            "available_time": 480,
                            "m_rate": 25,
                        },
                    },
                },
                {
                    "at": 150,
                    "node": "a2",
                    "signer": "@vendor",
                    "payload": {
                        "contract": "relationship",
                        "method": "open",
                        "args": {"counterparty": "@mill", "terms": "job lot"},
                    },
                },
            ],
        },
    }
    doc.update(over)
    return doc


def _write_scenario(tmp_path, **over):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(_scenario_doc(**over)))
    return str(path)


class TestKeygen:
    def test_seeded_is_deterministic(self, capsys):
        assert main(["keygen", "--seed", "alpha", "--format", "json"]) == 0
        first = json.loads(capsys.readouterr().out)
        assert main(["keygen", "--seed", "alpha", "--format", "json"]) == 0
        second = json.loads(capsys.readouterr().out)
        assert first == second
        assert is_address(first["address"])
        assert len(first["public_key"]) == 64

    def test_unseeded_differs(self, capsys):
        main(["keygen", "--format", "json"])
        one = json.loads(capsys.readouterr().out)
        main(["keygen", "--format", "json"])
        two = json.loads(capsys.readouterr().out)
        assert one["address"] != two["address"]

    def test_text_format(self, capsys):
        assert main(["keygen", "--seed", "alpha"]) == 0
        out = capsys.readouterr().out
        assert "address" in out
        assert "derived deterministically" in out


class TestGenesis:
    def test_prints_participants(self, capsys):
        code = main(["genesis", "alice=k1", "bob=k2", "--timestamp", "5"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["timestamp_ms"] == 5
        names = [p["name"] for p in doc["participants"]]
        assert names == ["alice", "bob"]
        assert all(is_address(p["address"]) for p in doc["participants"])

    def test_writes_file(self, capsys, tmp_path):
        out_path = tmp_path / "genesis.json"
        assert main(["genesis", "alice=k1", "-o", str(out_path)]) == 0
        assert "wrote" in capsys.readouterr().out
        assert json.loads(out_path.read_text())["participants"][0]["name"] == "alice"

    def test_bad_participant_spec(self, capsys):
        assert main(["genesis", "alice"]) == 1
        assert "bad participant" in capsys.readouterr().err


class TestRun:
    def test_convergent_scenario(self, capsys, tmp_path):
        scn = _write_scenario(tmp_path)
        trace_path = tmp_path / "out.trace"
        assert main(["run", scn, "--trace", str(trace_path)]) == 0
        out = capsys.readouterr().out
        assert "converged" in out and "DID NOT" not in out
        records = read_trace(str(trace_path))
        assert records[0]["event"] == "scenario"
        assert records[-1]["event"] == "end"

    def test_missing_file(self, capsys, tmp_path):
        assert main(["run", str(tmp_path / "nope.json")]) == 1
        assert "config error" in capsys.readouterr().err

    def test_invalid_scenario(self, capsys, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{}")
        assert main(["run", str(path)]) == 1
        assert "config error" in capsys.readouterr().err

    def test_non_convergent_exits_2(self, capsys, tmp_path):
        scn = _write_scenario(tmp_path, duration_ms=900)
        trace_path = tmp_path / "partial.trace"
        assert main(["run", scn, "--trace", str(trace_path)]) == 2
        assert "DID NOT CONVERGE" in capsys.readouterr().out
        # the partial trace is still written for post-mortem inspection
        assert read_trace(str(trace_path))[-1]["event"] == "end"


@pytest.fixture(scope="module")
def finished_trace(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli-inspect")
    scn = _write_scenario(tmp_path)
    trace_path = tmp_path / "done.trace"
    assert main(["run", scn, "--trace", str(trace_path)]) == 0
    addresses = {
        "vendor": json.loads(_keygen_json("cli/vendor"))["address"],
        "mill": json.loads(_keygen_json("cli/mill"))["address"],
    }
    return str(trace_path), addresses


def _keygen_json(seed):
    import io
    from contextlib import redirect_stdout

    buf = io.StringIO()
    with redirect_stdout(buf):
        main(["keygen", "--seed", seed, "--format", "json"])
    return buf.getvalue()


class TestInspect:
    def test_chain_text_and_json(self, finished_trace, capsys):
        trace, _ = finished_trace
        assert main(["inspect", trace, "chain"]) == 0
        assert "height" in capsys.readouterr().out
        assert main(["inspect", trace, "chain", "--format", "json"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["height"] >= 2

    def test_block_by_prefix(self, finished_trace, capsys):
        trace, _ = finished_trace
        records = read_trace(trace)
        block_id = next(
            r["block"]["id"]
            for r in records
            if r["event"] == "block_produced" and r["block"]["transactions"]
        )
        assert main(["inspect", trace, "block", block_id[:12]]) == 0
        assert "canonical=True" in capsys.readouterr().out
        assert main(["inspect", trace, "block", block_id, "--format", "json"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["id"] == block_id
        assert all(r["ok"] for r in data["receipts"])

    def test_block_needs_target(self, finished_trace, capsys):
        trace, _ = finished_trace
        assert main(["inspect", trace, "block"]) == 1
        assert "needs an id" in capsys.readouterr().err

    def test_block_unknown_prefix(self, finished_trace, capsys):
        trace, _ = finished_trace
        assert main(["inspect", trace, "block", "ffff"]) == 1
        assert "not found" in capsys.readouterr().err

    def test_history(self, finished_trace, capsys):
        trace, addrs = finished_trace
        assert main(["inspect", trace, "history", addrs["vendor"]]) == 0
        assert "history of" in capsys.readouterr().out
        assert main(["inspect", trace, "history", addrs["vendor"], "--format", "json"]) == 0
        events = json.loads(capsys.readouterr().out)
        assert len(events) >= 2  # machine added + relationship opened

    def test_history_requires_address(self, finished_trace, capsys):
        trace, _ = finished_trace
        assert main(["inspect", trace, "history", "vendor"]) == 1
        assert "needs an address" in capsys.readouterr().err

    def test_history_unknown_address(self, finished_trace, capsys):
        trace, _ = finished_trace
        assert main(["inspect", trace, "history", "0x" + "99" * 20]) == 1
        assert "not found" in capsys.readouterr().err

    def test_machines(self, finished_trace, capsys):
        trace, addrs = finished_trace
        assert main(["inspect", trace, "machines", addrs["vendor"]]) == 0
        assert "mill-1" in capsys.readouterr().out

    def test_machines_for_participant_without_any(self, finished_trace, capsys):
        trace, addrs = finished_trace
        assert main(["inspect", trace, "machines", addrs["mill"]]) == 0
        assert "0 machine(s)" in capsys.readouterr().out

    def test_machines_unregistered_address(self, finished_trace, capsys):
        trace, _ = finished_trace
        assert main(["inspect", trace, "machines", "0x" + "99" * 20]) == 1
        assert "not a vendor" in capsys.readouterr().err

    def test_relationships(self, finished_trace, capsys):
        trace, _ = finished_trace
        assert main(["inspect", trace, "relationships"]) == 0
        out = capsys.readouterr().out
        assert "1 relationship(s)" in out
        assert "job lot" in out

    def test_missing_trace_file(self, capsys, tmp_path):
        assert main(["inspect", str(tmp_path / "gone.trace"), "chain"]) == 1
        assert "error" in capsys.readouterr().err

    def test_corrupt_trace_file(self, capsys, tmp_path):
        path = tmp_path / "junk.trace"
        path.write_text("mangled\n")
        assert main(["inspect", str(path), "chain"]) == 1
        assert "error" in capsys.readouterr().err


class TestBench:
    def test_small_run_with_csv(self, capsys, tmp_path):
        csv_path = tmp_path / "samples.csv"
        code = main(
            [
                "bench",
                "--modes", "poa",
                "--invocations", "2",
                "--runs", "1",
                "--confirm-depth", "2",
                "--seed", "7",
                "--poa-period-ms", "500",
                "--csv", str(csv_path),
                "--quiet",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "poa" in out
        lines = csv_path.read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 3  # header + 2 invocations

    def test_bad_spec(self, capsys):
        assert main(["bench", "--runs", "0", "--quiet"]) == 1
        assert "config error" in capsys.readouterr().err

    def test_unreachable_depth_aborts(self, capsys):
        code = main(
            [
                "bench",
                "--modes", "poa",
                "--invocations", "1",
                "--runs", "1",
                "--poa-period-ms", "200000",
                "--quiet",
            ]
        )
        assert code == 2
        assert "benchmark aborted" in capsys.readouterr().err
