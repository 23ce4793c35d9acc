import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from ackscan import cli
from ackscan.analysis import l4_l7_discrepancy

MIXED = str(Path(__file__).resolve().parents[1] / "scenarios" / "mixed.toml")

SMALL = """
seed = 7
[conditions]
loss = 0.02
[[endpoints]]
ip = "10.9.0.1"
count = 4
behavior = "honest"
protocol = "http"
ports = [80]
[[endpoints]]
ip = "10.9.1.1"
count = 3
behavior = "zero_window"
ports = [80]
[[endpoints]]
ip = "10.9.2.1"
count = 3
behavior = "non_acker"
ports = [80]
[[endpoints]]
ip = "10.9.3.1"
behavior = "shunner"
protocol = "http"
ports = [80]
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return str(path)


def run(argv, capsys):
    code = cli.main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_parse_args_examples(tmp_path):
    cfg = cli.parse_args(["scan", "--handshakes", "http,tls", "--sim", "s.toml"])
    assert (cfg.command, cfg.mode, cfg.plan, cfg.scenario) == ("scan", "simulate", ("http", "tls"), "s.toml")
    cfg = cli.parse_args(["order", "matrix.csv", "--k", "5"])
    assert (cfg.command, cfg.input, cfg.k) == ("order", "matrix.csv", 5)
    assert cli.parse_args(["order", "m.csv"]) == cli.parse_args(["order", "m.csv"])


@pytest.mark.parametrize("argv", [
    ["scan"],
    ["scan", "--source-ip", "192.0.2.1"],
    ["scan", "targets.txt", "--sim", "s.toml", "--source-ip", "192.0.2.1"],
    ["scan", "--bogus"],
    ["scan", "--handshakes", "", "--sim", "s.toml"],
    ["deduce", "--timeout", "-1", "--sim", "s.toml"],
])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2
    capsys.readouterr()


def test_emit_counts():
    out = io.StringIO()
    rows = [{"ip": "10.0.0.1", "port": p} for p in (1, 2, 3)]
    assert cli.emit(rows, "jsonl", out) == 0
    lines = out.getvalue().splitlines()
    assert len(lines) == 3 and [json.loads(l)["port"] for l in lines] == [1, 2, 3]
    out = io.StringIO()
    assert cli.emit([], "jsonl", out) == 0 and out.getvalue() == ""
    assert cli.emit([], "table", out) == 0 and out.getvalue() == ""


class ClosedPipe(io.StringIO):
    def write(self, s):
        raise BrokenPipeError


def test_emit_broken_pipe_is_failure():
    assert cli.emit([{"a": 1}], "jsonl", ClosedPipe()) == 1


def test_simulate_deterministic_and_table_matches_jsonl(small, capsys):
    code, first, _ = run(["simulate", small], capsys)
    assert code == 0
    code, second, _ = run(["simulate", small], capsys)
    assert first == second
    rows = [json.loads(l) for l in first.splitlines()]
    assert len(rows) == 11
    code, table, _ = run(["simulate", small, "--format", "table"], capsys)
    assert code == 0
    total = next(l.split() for l in table.splitlines() if l.startswith("total"))
    agg = l4_l7_discrepancy(rows)
    assert [int(x) for x in total[1:]] == [sum(getattr(r, f) for r in agg.values()) for f in
                                           ("synack_count", "ack_data_count", "l7_expected_count",
                                            "unexpected_count")]


def test_seed_flag_is_reproducible(small, capsys):
    _, a, _ = run(["simulate", small, "--seed", "1"], capsys)
    _, b, _ = run(["simulate", small, "--seed", "1"], capsys)
    assert a == b


def test_segment_log_file(small, tmp_path, capsys):
    log = tmp_path / "seg.jsonl"
    assert run(["simulate", small, "--segment-log", str(log)], capsys)[0] == 0
    lines = log.read_text().splitlines()
    assert lines and all(json.loads(l) for l in lines)


def test_scan_and_deduce_sim(small, capsys):
    code, out, _ = run(["scan", "--sim", small, "--timescale", "0.001"], capsys)
    rows = [json.loads(l) for l in out.splitlines()]
    assert code == 0 and len(rows) == 11
    assert {r["protocol"] for r in rows if r["outcome"] == "AckHost"} == {"http"}
    code, out, _ = run(["deduce", "--sim", small, "--timescale", "0.001"], capsys)
    states = {json.loads(l)["refined_state"] for l in out.splitlines()}
    assert code == 0 and {"AcknowledgesData", "ZeroWindowNeverOpened", "EstablishedNoAck"} <= states


def test_nonresponsive_hosts_still_exit_zero(tmp_path, capsys):
    path = tmp_path / "dead.toml"
    path.write_text('[[endpoints]]\nip = "10.8.0.1"\nbehavior = "non_acker"\nports = [80]\n')
    code, out, _ = run(["scan", "--sim", str(path), "--timescale", "0.001"], capsys)
    assert code == 0 and json.loads(out)["outcome"] == "NoAckHost"


def test_order_and_stats(tmp_path, capsys):
    matrix = tmp_path / "m.csv"
    matrix.write_text("service,wait,http,tls\na,1,0,0\nb,0,1,1\nc,0,0,1\nd,1,0,0\n")
    code, out, _ = run(["order", str(matrix)], capsys)
    rows = [json.loads(l) for l in out.splitlines()]
    assert code == 0 and [r["handshake"] for r in rows][:2] == ["tls", "wait"]
    records = tmp_path / "r.jsonl"
    records.write_text("\n".join(json.dumps({"ip": f"10.0.0.{i}", "port": 80, "outcome": "AckHost",
                                             "refined_state": "AcknowledgesData", "protocol": "http"})
                                 for i in range(3)) + "\n")
    code, out, _ = run(["stats", str(records), "--format", "table"], capsys)
    assert code == 0 and "total" in out


def test_offline_classify(tmp_path, capsys):
    rows = tmp_path / "c.jsonl"
    rows.write_text(json.dumps({"ip": "10.0.0.1", "port": 80, "outcome": "NoAckHost",
                                "refined_state": "ZeroWindowNeverOpened", "protocol": None}) + "\n")
    code, out, _ = run(["classify", str(rows)], capsys)
    assert code == 0 and json.loads(out)["behavior"] == "ZeroWindowProtection"


def test_missing_files_exit_1(tmp_path, capsys):
    assert run(["order", str(tmp_path / "nope.csv")], capsys)[0] == 1
    assert run(["simulate", str(tmp_path / "nope.toml")], capsys)[0] == 1


def test_help_lists_defaults():
    out = subprocess.run([sys.executable, "-m", "ackscan", "scan", "--help"], capture_output=True, text=True).stdout
    for flag in ("--handshakes", "--wildcard-ports", "--timeout", "--timescale", "--seed", "--output"):
        assert flag in out
    assert "(default: 5.0)" in out and "(default: wait,http,tls,dns,pptp)" in out


def test_broken_pipe_subprocess(small):
    proc = subprocess.Popen([sys.executable, "-m", "ackscan", "simulate", MIXED, "--segment-log", "-"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    proc.stdout.close()
    proc.stderr.close()
    assert proc.wait(timeout=60) == 1
