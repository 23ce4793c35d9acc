"""Command-line entry point.

Subcommands::

    scan      identify services (originate from ip,port lines or adopt SYN-ACKs)
    deduce    run the TCP state deduction against ip,port lines
    classify  label defenses, offline from JSONL or live against a scenario
    order     greedy handshake order from a 0/1 CSV matrix
    stats     per-port L4/L7 table (and popular ports) from scan JSONL
    simulate  full survey of a scenario plus the segment log

Exit status is 0 unless configuration or transport failed; NoAckHost
verdicts are results, not errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

from . import __version__
from . import analysis
from . import engine as eng
from . import middlebox as mb
from . import registry as reg
from . import schema
from .deduce import DeduceConfig, Outcome, RefinedState, StateVerdict, deduce_many
from .netsim import scenario as scn
from .pipeline import PipelineConfig, survey
from .transport import LiveTransport, Transport, TransportError

log = logging.getLogger("ackscan")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class Config:
    command: str
    mode: str = "live"                 # live | simulate
    input: Optional[str] = None        # path or '-'
    scenario: Optional[str] = None
    plan: Tuple[str, ...] = eng.DEFAULT_PLAN
    wildcard_ports: int = 0
    timeout: Optional[float] = None
    timescale: float = 1.0
    signatures: Optional[str] = None
    seed: Optional[int] = None
    source_ips: Tuple[str, ...] = ()
    output: str = "-"
    format: str = "jsonl"
    strict_checksums: bool = False
    adopt: bool = False
    plan_only: bool = False
    exhaustive: bool = False
    expected_first: bool = True
    retransmits: int = 8
    k: Optional[int] = None
    confidence: float = 0.999
    segment_log: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)


# -- argument parsing ----------------------------------------------------------

def _plan(text: str) -> Tuple[str, ...]:
    plan = tuple(p.strip() for p in text.split(",") if p.strip())
    if not plan:
        raise argparse.ArgumentTypeError("empty handshake list")
    return plan


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="ackscan", description="Find real TCP services behind SYN-ACKs.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__} (schema {schema.SCHEMA_VERSION})")
    parser.add_argument("--log", default="warning", choices=["debug", "info", "warning", "error"],
                        help="log level (stderr)")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--output", default="-", help="output path, '-' for stdout")
    common.add_argument("--format", default="jsonl", choices=["jsonl", "table"], help="output format")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the scenario's)")

    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--sim", metavar="SCENARIO", default=None, help="run against a simulated network (TOML)")
    net.add_argument("--source-ip", action="append", default=[], metavar="IP",
                     help="live-mode source address; repeat for fresh addresses")
    net.add_argument("--timescale", type=_positive, default=1.0, help="multiplier on every timeout")
    net.add_argument("--strict-checksums", action="store_true", help="drop segments with bad checksums")

    plan = argparse.ArgumentParser(add_help=False)
    plan.add_argument("--handshakes", type=_plan, default=",".join(eng.DEFAULT_PLAN), metavar="A,B,C",
                      help="handshake plan; entries may name a variant as proto:variant")
    plan.add_argument("--wildcard-ports", type=_nonneg_int, default=0, metavar="N",
                      help="ephemeral ports probed for wildcard acking (0 disables)")
    plan.add_argument("--plan-as-given", action="store_true",
                      help="do not lead with the port's expected protocol")
    plan.add_argument("--signatures", default=None, metavar="FILE", help="signature file overriding the registry")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", parents=[common, net, plan], formatter_class=fmt,
                       help="identify services")
    p.add_argument("input", nargs="?", default=None,
                   help="ip,port lines (or SYN-ACK CSV with --adopt); '-' for stdin")
    p.add_argument("--timeout", type=_positive, default=5.0, help="seconds to wait for a data ACK")
    p.add_argument("--adopt", action="store_true",
                   help="continue connections from SYN-ACK CSV: saddr,sport,daddr,dport,seqnum,acknum,window")
    p.add_argument("--plan-only", action="store_true",
                   help="emit only identified services with a follow-up delay, for a full-handshake scanner")
    p.add_argument("--strict-retry", action="store_true", help="use the long follow-up delay")
    p.add_argument("--exhaustive", action="store_true", help="run the whole plan on every target (baseline)")
    p.add_argument("--max-inflight", type=int, default=1000, help="concurrent targets")

    p = sub.add_parser("deduce", parents=[common, net], formatter_class=fmt, help="deduce server TCP state")
    p.add_argument("input", nargs="?", default=None, help="ip,port lines; '-' for stdin")
    p.add_argument("--timeout", type=_positive, default=100.0, help="total seconds per target")
    p.add_argument("--retransmits", type=int, default=8, help="data retransmissions within the timeout")

    p = sub.add_parser("classify", parents=[common, net, plan], formatter_class=fmt,
                       help="label middlebox behavior")
    p.add_argument("input", nargs="?", default=None,
                   help="deduce JSONL with optional probe results (offline), or ip,port lines with --sim")

    p = sub.add_parser("order", parents=[common], formatter_class=fmt, help="greedy handshake order")
    p.add_argument("input", help="CSV: header of handshakes, one 0/1 row per service (optional leading id column)")
    p.add_argument("--k", type=_nonneg_int, default=None, help="handshakes to select (default all)")

    p = sub.add_parser("stats", parents=[common], formatter_class=fmt, help="aggregate scan JSONL")
    p.add_argument("input", help="scan JSONL; '-' for stdin")
    p.add_argument("--confidence", type=float, default=0.999, help="Grubbs confidence for popular ports")

    p = sub.add_parser("simulate", parents=[common, plan], formatter_class=fmt,
                       help="survey a scenario and log every segment")
    p.add_argument("scenario", help="scenario TOML")
    p.add_argument("--timescale", type=_positive, default=0.001, help="multiplier on every timeout")
    p.add_argument("--segment-log", default="-", metavar="PATH",
                   help="where the segment log goes; '-' for stderr")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> Config:
    """Parse and cross-check arguments. Raises SystemExit(2) on usage errors."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return _to_config(ns)
    except UsageError as exc:
        parser.error(str(exc))
        raise  # pragma: no cover


def _to_config(ns: argparse.Namespace) -> Config:
    cfg = Config(command=ns.command, output=ns.output, format=ns.format, seed=ns.seed)
    cfg.input = getattr(ns, "input", None)
    if ns.command in ("scan", "deduce", "classify"):
        cfg.scenario = ns.sim
        cfg.mode = "simulate" if ns.sim else "live"
        cfg.source_ips = tuple(ns.source_ip)
        cfg.timescale = ns.timescale
        cfg.strict_checksums = ns.strict_checksums
        if ns.sim and ns.source_ip:
            raise UsageError("--source-ip is a live-mode setting and conflicts with --sim")
        if not ns.sim and not ns.source_ip and not (ns.command == "classify" and cfg.input):
            raise UsageError("live mode needs --source-ip (or use --sim SCENARIO)")
        if not ns.sim and cfg.input is None:
            raise UsageError(f"{ns.command} needs an input file ('-' for stdin)")
    if ns.command in ("scan", "classify", "simulate"):
        cfg.plan = ns.handshakes
        cfg.wildcard_ports = ns.wildcard_ports
        cfg.signatures = ns.signatures
        cfg.expected_first = not ns.plan_as_given
    if ns.command == "scan":
        cfg.timeout = ns.timeout
        cfg.adopt = ns.adopt
        cfg.plan_only = ns.plan_only
        cfg.exhaustive = ns.exhaustive
        cfg.extra = {"strict_retry": ns.strict_retry, "max_inflight": ns.max_inflight}
        if ns.plan_only and ns.exhaustive:
            raise UsageError("--plan-only and --exhaustive do not mix")
        if ns.max_inflight < 1:
            raise UsageError("--max-inflight must be at least 1")
    elif ns.command == "deduce":
        cfg.timeout = ns.timeout
        cfg.retransmits = ns.retransmits
        if ns.retransmits < 1:
            raise UsageError("--retransmits must be at least 1")
    elif ns.command == "classify":
        if not ns.sim and cfg.source_ips:
            raise UsageError("live two-source probing is not wired up; classify offline or with --sim")
    elif ns.command == "order":
        cfg.k = ns.k
    elif ns.command == "stats":
        cfg.confidence = ns.confidence
        if not 0 < ns.confidence < 1:
            raise UsageError("--confidence must be within (0, 1)")
    elif ns.command == "simulate":
        cfg.mode = "simulate"
        cfg.scenario = ns.scenario
        cfg.timescale = ns.timescale
        cfg.segment_log = ns.segment_log
    return cfg


# -- input -------------------------------------------------------------------------

def _open_in(path: str) -> IO[str]:
    return sys.stdin if path == "-" else open(path, newline="")


def _lines(path: str) -> Iterator[str]:
    fh = _open_in(path)
    try:
        for raw in fh:
            line = raw.strip()
            if line and not line.startswith("#"):
                yield line
    finally:
        if fh is not sys.stdin:
            fh.close()


def read_targets(path: str) -> List[Tuple[str, int]]:
    targets = []
    for line in _lines(path):
        ip, _, port = line.partition(",")
        try:
            targets.append((ip.strip(), int(port)))
        except ValueError:
            raise UsageError(f"bad target line {line!r}; expected ip,port") from None
    return targets


def read_jsonl(path: str) -> Iterator[Dict[str, Any]]:
    for line in _lines(path):
        try:
            yield json.loads(line)
        except json.JSONDecodeError as exc:
            raise UsageError(f"bad JSON line: {exc}") from None


# -- output ---------------------------------------------------------------------------

def render_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> str:
    cells = [[str(c) for c in columns]] + [["" if r.get(c) is None else str(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def discrepancy_rows(records: Iterable[Mapping[str, Any]]) -> List[Dict[str, Any]]:
    table = analysis.l4_l7_discrepancy(records)
    rows = [{"port": port, **row.as_dict()} for port, row in table.items()]
    if rows:
        total = {"port": "total"}
        for key in ("synack_count", "ack_data_count", "l7_expected_count", "unexpected_count"):
            total[key] = sum(r[key] for r in rows)
        rows.append(total)
    return rows


DISCREPANCY_COLUMNS = ("port", "synack_count", "ack_data_count", "l7_expected_count", "unexpected_count")


def emit(rows: Iterable[Mapping[str, Any]], fmt: str, out: IO[str], *,
         columns: Optional[Sequence[str]] = None, aggregate: bool = False) -> int:
    """Write rows as JSON lines (flushed per line) or as a table.

    With ``aggregate`` the table shows the per-port L4/L7 aggregate of
    scan records instead of the rows themselves.
    """
    try:
        if fmt == "jsonl":
            for row in rows:
                out.write(schema.dumps(row) + "\n")
                out.flush()
        else:
            rows = list(rows)
            if aggregate:
                out.write(render_table(discrepancy_rows(rows), DISCREPANCY_COLUMNS))
            elif rows:
                out.write(render_table(rows, columns or list(rows[0])))
            out.flush()
    except BrokenPipeError:
        # reader went away: stop quietly and report failure
        try:
            devnull = os.open(os.devnull, os.O_WRONLY)
            os.dup2(devnull, out.fileno())
        except (OSError, ValueError, io.UnsupportedOperation):
            pass
        return EXIT_FAIL
    return EXIT_OK


# -- wiring ------------------------------------------------------------------------------

def _registry(cfg: Config) -> reg.Registry:
    base = reg.default_registry()
    registry = reg.Registry.load(cfg.signatures, base) if cfg.signatures else base
    reg.validate_plan(registry, cfg.plan)
    return registry


def _scenario(cfg: Config) -> scn.Scenario:
    sc = scn.load(cfg.scenario)
    if cfg.seed is not None:
        sc = sc.with_conditions(seed=cfg.seed)
    return sc


def _transport(cfg: Config) -> Tuple[Transport, Optional[scn.Scenario]]:
    if cfg.mode == "simulate":
        sc = _scenario(cfg)
        return sc.network(timescale=cfg.timescale, strict_checksums=cfg.strict_checksums), sc
    return LiveTransport(cfg.source_ips, seed=cfg.seed or 0, strict_checksums=cfg.strict_checksums), None


def _targets(cfg: Config, sc: Optional[scn.Scenario]) -> List[Tuple[str, int]]:
    if cfg.input is not None:
        return read_targets(cfg.input)
    return sc.targets()


def _engine_config(cfg: Config) -> eng.EngineConfig:
    return eng.EngineConfig(plan=cfg.plan, wildcard_probe_count=cfg.wildcard_ports,
                            ack_timeout=cfg.timeout or eng.EngineConfig.ack_timeout,
                            timescale=cfg.timescale, exhaustive=cfg.exhaustive,
                            expected_first=cfg.expected_first,
                            max_inflight=cfg.extra.get("max_inflight", 1000), seed=cfg.seed or 0)


def run_scan(cfg: Config, out: IO[str]) -> int:
    registry = _registry(cfg)
    transport, sc = _transport(cfg)
    ecfg = _engine_config(cfg)
    if cfg.adopt:
        if cfg.input is not None:
            synacks = [eng.parse_synack_csv(line) for line in _lines(cfg.input)]
        else:
            # simulator without a SYN-ACK file: play the stateless scanner ourselves
            synacks = eng.SynSweep(transport, sc.targets(), timescale=cfg.timescale).run()
        tasks = (eng.ScanTask((s.src_ip, s.src_port),
                              eng.plan_for(s.src_port, cfg.plan) if cfg.expected_first else cfg.plan,
                              s, cfg.wildcard_ports) for s in synacks)
    else:
        tasks = eng.tasks_for(_targets(cfg, sc), ecfg)
    records = eng.run(tasks, ecfg, transport, registry)
    if cfg.plan_only:
        delay = eng.retry_delay_policy(strict=cfg.extra.get("strict_retry", False), timescale=cfg.timescale)
        rows = (schema.plan_to_dict(r, delay) for r in records if r.identified_protocol)
        return emit(rows, cfg.format, out)
    status = emit((schema.record_to_dict(r) for r in records), cfg.format, out, aggregate=True)
    return status


def run_deduce(cfg: Config, out: IO[str]) -> int:
    transport, sc = _transport(cfg)
    dcfg = DeduceConfig(total_timeout=cfg.timeout, retransmit_budget=cfg.retransmits,
                        simulator_timescale=cfg.timescale)
    targets = _targets(cfg, sc)
    verdicts = deduce_many(targets, dcfg, transport)
    rows = [schema.verdict_to_dict(t, v) for t, v in zip(targets, verdicts)]
    return emit(rows, cfg.format, out, columns=schema.DEDUCE_FIELDS)


def _probe_result(obj: Optional[Mapping[str, str]]) -> Optional[mb.TwoSourceProbeResult]:
    if obj is None:
        return None
    try:
        return mb.TwoSourceProbeResult(mb.ProbeResponse(obj["used"]), mb.ProbeResponse(obj["fresh"]))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad two-source probe result {obj!r}") from exc


def classify_offline(rows: Iterable[Mapping[str, Any]]) -> List[Dict[str, Any]]:
    labels = []
    for row in rows:
        schema.check(row, ("ip", "port", "outcome", "refined_state"))
        try:
            state = RefinedState(row["refined_state"])
        except ValueError:
            raise UsageError(f"unknown refined_state {row['refined_state']!r}") from None
        outcome = Outcome.ACK_HOST if state is RefinedState.ACKNOWLEDGES_DATA else Outcome.NO_ACK_HOST
        synacks = int(row.get("synack_count", 0))
        if state is RefinedState.SYNACK_LOOP:
            synacks = max(synacks, 2)
        window = 0 if state is RefinedState.ZERO_WINDOW else int(row.get("window", 0))
        verdict = StateVerdict(outcome, state, synack_count=synacks, final_window=window)
        wildcard = mb.BehaviorLabel(mb.BehaviorKind.WILDCARD_ACKER, supporting_probes=5) if row.get("wildcard") else None
        label = mb.classify(verdict, shunning=_probe_result(row.get("shunning_probe")),
                            dynamic=_probe_result(row.get("dynamic_probe")), wildcard=wildcard)
        labels.append((row, label))
    by_kind: Dict[mb.BehaviorKind, List[str]] = {}
    for row, label in labels:
        if label.kind is not mb.BehaviorKind.NONE:
            by_kind.setdefault(label.kind, []).append(row["ip"])
    out = []
    for row, label in labels:
        hint = mb.granularity_hint(row["ip"], by_kind[label.kind]) if label.kind in by_kind else mb.Granularity.UNKNOWN
        out.append({"ip": row["ip"], "port": int(row["port"]), "behavior": label.kind.value,
                    "granularity_hint": hint.value})
    return out


def _pipeline_config(cfg: Config) -> PipelineConfig:
    return PipelineConfig(engine=_engine_config(cfg))


def run_classify(cfg: Config, out: IO[str]) -> int:
    if cfg.mode != "simulate":
        return emit(classify_offline(read_jsonl(cfg.input)), cfg.format, out, columns=schema.CLASSIFY_FIELDS)
    registry = _registry(cfg)
    transport, sc = _transport(cfg)
    results = survey(_targets(cfg, sc), transport, _pipeline_config(cfg), registry)
    return emit([schema.classification_to_dict(c) for c in results], cfg.format, out, columns=schema.CLASSIFY_FIELDS)


def read_matrix(path: str) -> analysis.ResponseMatrix:
    with _open_in(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise UsageError("empty matrix file")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    has_ids = bool(body) and len(body[0]) == len(header) and header[0].lower() in ("service", "id", "")
    names = header[1:] if has_ids else header
    services, cells = [], []
    for i, r in enumerate(body):
        values = r[1:] if has_ids else r
        if len(values) != len(names):
            raise UsageError(f"matrix row {i + 1} has {len(values)} cells, expected {len(names)}")
        try:
            cells.append(tuple(bool(int(v)) for v in values))
        except ValueError:
            raise UsageError(f"matrix row {i + 1} is not 0/1") from None
        services.append(r[0] if has_ids else str(i))
    return analysis.ResponseMatrix(tuple(services), tuple(names), tuple(cells))


def run_order(cfg: Config, out: IO[str]) -> int:
    matrix = read_matrix(cfg.input)
    order = analysis.greedy_order(matrix, cfg.k)
    rows, total = [], 0
    for rank, (name, gain) in enumerate(order, 1):
        total += gain
        rows.append({"rank": rank, "handshake": name, "marginal": round(float(gain), 6),
                     "cumulative": round(float(total), 6)})
    return emit(rows, cfg.format, out, columns=("rank", "handshake", "marginal", "cumulative"))


def run_stats(cfg: Config, out: IO[str]) -> int:
    records = list(read_jsonl(cfg.input))
    for r in records:
        schema.check(r, ("port", "outcome", "refined_state", "protocol"))
    rows = discrepancy_rows(records)
    per_port = {r["port"]: r["synack_count"] for r in rows if r["port"] != "total"}
    if len(per_port) >= 3:
        expected = {p: any(rec.get("protocol") and rec["protocol"] == reg.EXPECTED_BY_PORT.get(p)
                           for rec in records if rec["port"] == p) for p in per_port}
        popular, _ = analysis.grubbs_split(per_port, cfg.confidence, expected)
        for r in rows:
            if r["port"] != "total":
                r["popular"] = r["port"] in popular
    columns = DISCREPANCY_COLUMNS + (("popular",) if len(per_port) >= 3 else ())
    return emit(rows, cfg.format, out, columns=columns)


def run_simulate(cfg: Config, out: IO[str]) -> int:
    registry = _registry(cfg)
    sc = _scenario(cfg)
    net = sc.network(timescale=cfg.timescale)
    results = survey(sc.targets(), net, _pipeline_config(cfg), registry)
    rows = []
    for c in results:
        if c.record is not None:
            row = schema.record_to_dict(c.record, behavior=c.label.kind.value)
            row["protocol"] = c.protocol
        else:
            row = {"ip": c.ip, "port": c.port, "outcome": Outcome.NO_ACK_HOST.value,
                   "refined_state": RefinedState.NEVER_SYNACKED.value, "behavior": c.label.kind.value,
                   "protocol": None, "attempts": 0, "pkts_out": 0, "pkts_in": 0, "ms": 0.0, "seq": -1,
                   "error": None}
        row["granularity_hint"] = c.label.granularity_hint.value
        rows.append(row)
    status = emit(rows, cfg.format, out, aggregate=True)
    if cfg.segment_log is not None:
        if cfg.segment_log == "-":
            status = max(status, emit(net.log_lines(), "jsonl", sys.stderr))
        else:
            with open(cfg.segment_log, "w") as fh:
                status = max(status, emit(net.log_lines(), "jsonl", fh))
    return status


COMMANDS = {"scan": run_scan, "deduce": run_deduce, "classify": run_classify, "order": run_order,
            "stats": run_stats, "simulate": run_simulate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=ns.log.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _to_config(ns)
    except UsageError as exc:
        parser.error(str(exc))
    out: IO[str] = sys.stdout
    try:
        if cfg.output != "-":
            out = open(cfg.output, "w")
        return COMMANDS[cfg.command](cfg, out)
    except UsageError as exc:
        print(f"ackscan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, scn.ScenarioError, reg.RegistryError, analysis.AnalysisError,
            OSError, ValueError) as exc:
        if isinstance(exc, BrokenPipeError):
            return EXIT_FAIL
        print(f"ackscan: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if out is not sys.stdout:
            out.close()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
