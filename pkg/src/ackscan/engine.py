"""The scan engine: filter non-acknowledging hosts and fingerprint the rest.

Per target, handshakes from the plan are tried one connection at a time.
The first data segment rides on the handshake-completing ACK. Hosts that
never acknowledge it get exactly one retransmission (with PSH) before
being dropped; zero-window SYN-ACKs are dropped without sending data. Any
bytes the server sends are fingerprinted against the whole registry, so a
banner or an unexpected protocol is identified on the first connection.

``next_action`` is the pure transition table; ``TargetScan`` drives it
over a ``Transport``; ``run`` multiplexes many targets with a ceiling on
in-flight scans.
"""

from __future__ import annotations

import enum
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from . import middlebox as mb
from . import registry as reg
from .deduce import IN, OUT, DeduceConfig, Evidence, Outcome, RefinedState, StateVerdict, verdict_from
from .packet import Flags, FourTuple, TcpSegment, adopt, segment, seq_add, seq_geq
from .transport import Timer, Transport, TransportError

DEFAULT_PLAN = ("wait", "http", "tls", "dns", "pptp")

Target = Tuple[str, int]


class ProtocolViolation(RuntimeError):
    """next_action was asked about a (phase, event) pair that cannot happen."""

    def __init__(self, phase, event):
        super().__init__(f"protocol violation: {event!r} in phase {phase.value}")


class FlowPhase(enum.Enum):
    SYN_SENT = "SynSent"
    WAITING = "Waiting"      # established, nothing sent, collecting a banner
    DATA_SENT = "DataSent"
    CLOSED = "Closed"


# -- events -------------------------------------------------------------------

@dataclass(frozen=True)
class SynAckSeen:
    window: int
    repeat: int = 1   # SYN-ACKs seen on this connection, this one included


@dataclass(frozen=True)
class DataArrived:
    data: bytes


@dataclass(frozen=True)
class AckArrived:
    pass


@dataclass(frozen=True)
class RstOrFin:
    ack_covers_payload: bool


@dataclass(frozen=True)
class Timeout:
    pass


Event = Union[SynAckSeen, DataArrived, AckArrived, RstOrFin, Timeout]


# -- actions ------------------------------------------------------------------

class AbortReason(enum.Enum):
    ZERO_WINDOW = "ZeroWindow"
    NO_ACK = "NoAck"


@dataclass(frozen=True)
class Abort:
    reason: AbortReason


@dataclass(frozen=True)
class SendAckWithData:
    pass


@dataclass(frozen=True)
class ResendAck:
    pass


@dataclass(frozen=True)
class RetransmitSyn:
    pass


@dataclass(frozen=True)
class RetransmitWithPush:
    pass


@dataclass(frozen=True)
class Fingerprint:
    data: bytes


@dataclass(frozen=True)
class CloseThenNextHandshake:
    pass


@dataclass(frozen=True)
class Finish:
    identified: bool = False


Action = Union[Abort, SendAckWithData, ResendAck, RetransmitSyn, RetransmitWithPush, Fingerprint,
               CloseThenNextHandshake, Finish]

# a server repeating its SYN-ACK this often never saw our ACK
SYNACK_REPEAT_LIMIT = 3


def _onward(plan_remaining: bool) -> Action:
    return CloseThenNextHandshake() if plan_remaining else Finish()


def next_action(phase: FlowPhase, event: Event, *, plan_remaining: bool = False,
                retransmitted: bool = False) -> Action:
    """Transition table of one connection. Pure."""
    if phase is FlowPhase.SYN_SENT:
        if isinstance(event, SynAckSeen):
            return Abort(AbortReason.ZERO_WINDOW) if event.window == 0 else SendAckWithData()
        if isinstance(event, RstOrFin):
            return Abort(AbortReason.NO_ACK)
        if isinstance(event, Timeout):
            return Abort(AbortReason.NO_ACK) if retransmitted else RetransmitSyn()
        raise ProtocolViolation(phase, event)

    if phase in (FlowPhase.WAITING, FlowPhase.DATA_SENT):
        if isinstance(event, DataArrived):
            return Fingerprint(event.data)
        if isinstance(event, AckArrived):
            return _onward(plan_remaining)
        if isinstance(event, RstOrFin):
            return _onward(plan_remaining) if event.ack_covers_payload else Abort(AbortReason.NO_ACK)
        if isinstance(event, SynAckSeen):
            return ResendAck() if event.repeat < SYNACK_REPEAT_LIMIT else Abort(AbortReason.NO_ACK)
        if isinstance(event, Timeout):
            if phase is FlowPhase.WAITING:
                return _onward(plan_remaining)
            return Abort(AbortReason.NO_ACK) if retransmitted else RetransmitWithPush()
        raise ProtocolViolation(phase, event)

    raise ProtocolViolation(phase, event)


# -- configuration and records -------------------------------------------------

def retry_delay_policy(*, strict: bool = False, timescale: float = 1.0, delay: Optional[float] = None) -> float:
    """Wait before a follow-up full handshake against a just-fingerprinted host.

    Most hosts that briefly block a fingerprinting client let it back in
    within 5 s; nearly all within 2 minutes, which is the strict setting.
    An explicit ``delay`` is clamped to [0, 120].
    """
    if delay is None:
        delay = 120.0 if strict else 5.0
    return min(max(delay, 0.0), 120.0) * timescale


@dataclass
class EngineConfig:
    plan: Tuple[str, ...] = DEFAULT_PLAN
    wildcard_probe_count: int = 0
    wildcard_threshold: Optional[int] = None
    connect_timeout: float = 3.0
    ack_timeout: float = 5.0
    banner_timeout: float = 3.0
    timescale: float = 1.0
    max_inflight: int = 1000
    exhaustive: bool = False   # naive baseline: always run the whole plan
    expected_first: bool = True   # lead with the port's expected protocol
    seed: int = 0

    def __post_init__(self) -> None:
        self.plan = tuple(self.plan)
        if not self.plan:
            raise ValueError("handshake plan is empty")
        if min(self.connect_timeout, self.ack_timeout, self.banner_timeout, self.timescale) <= 0:
            raise ValueError("timeouts and timescale must be positive")
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be at least 1")
        if self.wildcard_probe_count < 0:
            raise ValueError("wildcard_probe_count must be non-negative")

    def scaled(self, seconds: float) -> float:
        return seconds * self.timescale


@dataclass(frozen=True)
class ScanTask:
    target: Target
    handshake_plan: Tuple[str, ...] = DEFAULT_PLAN
    adopted_synack: Optional[TcpSegment] = None
    wildcard_probe_count: int = 0

    def __post_init__(self) -> None:
        if not self.handshake_plan:
            raise ValueError("handshake plan is empty")
        if self.adopted_synack is not None:
            s = self.adopted_synack
            if (s.src_ip, s.src_port) != tuple(self.target):
                raise ValueError("adopted SYN-ACK does not come from the target")


@dataclass
class ScanRecord:
    target: Target
    verdict: StateVerdict
    behavior: mb.BehaviorLabel
    identified_protocol: Optional[str]
    handshakes_attempted: int
    packets_sent: int
    packets_received: int
    wall_time: float
    matched_by: Optional[reg.MatchedBy] = None
    flows: Tuple[FourTuple, ...] = ()
    error: Optional[str] = None
    seq: int = -1

    @property
    def ip(self) -> str:
        return self.target[0]

    @property
    def port(self) -> int:
        return self.target[1]


# -- one connection --------------------------------------------------------------

@dataclass
class _Conn:
    key: FourTuple
    entry: str
    payload: bytes
    isn: int = 0
    next_seq: int = 0
    their_next: int = 0
    phase: FlowPhase = FlowPhase.SYN_SENT
    retransmitted: bool = False
    synacks: int = 0
    data_end: int = 0
    acked: bool = False
    peer_reset: bool = False
    evidence: List[Evidence] = field(default_factory=list)
    timer: Optional[Timer] = None


class TargetScan:
    """Runs the plan against one target and produces one ScanRecord."""

    def __init__(self, task: ScanTask, config: EngineConfig, transport: Transport,
                 registry: reg.Registry, source_ip: Optional[str] = None,
                 on_done: Optional[Callable[["TargetScan"], None]] = None):
        self.task = task
        self.cfg = config
        self.t = transport
        self.registry = registry
        if task.adopted_synack is not None:
            self.source_ip = task.adopted_synack.dst_ip
        else:
            self.source_ip = source_ip or transport.source_ips[0]
        self.on_done = on_done
        self.record: Optional[ScanRecord] = None
        self.expected = reg.EXPECTED_BY_PORT.get(task.target[1])
        self._index = -1
        self._conn: Optional[_Conn] = None
        self._keys: List[FourTuple] = []
        self._started = 0.0
        self._identified: Optional[reg.FingerprintResult] = None
        self._verdict: Optional[StateVerdict] = None
        self._main_done = False
        self._wildcard: Optional[mb.WildcardCheck] = None
        self._error: Optional[str] = None

    @property
    def done(self) -> bool:
        return self.record is not None

    # -- lifecycle ----------------------------------------------------------
    def start(self) -> "TargetScan":
        self._started = self.t.now()
        try:
            n = self.task.wildcard_probe_count
            if n:
                cfg = DeduceConfig(mb.WILDCARD_PROBE.probe_payload, mb.WILDCARD_PROBE.total_timeout,
                                   mb.WILDCARD_PROBE.retransmit_budget, self.cfg.timescale)
                rng = random.Random(f"{self.cfg.seed}:{self.task.target[0]}:{self.task.target[1]}")
                self._wildcard = mb.WildcardCheck(self.t, self.task.target[0], n, rng=rng,
                                                  exclude=(self.task.target[1],),
                                                  threshold=self.cfg.wildcard_threshold, config=cfg,
                                                  source_ip=self.source_ip,
                                                  on_done=lambda _check: self._maybe_complete())
                self._wildcard.start()
            self._next_handshake(first=True)
        except TransportError as exc:
            self._fail(str(exc))
        return self

    def _plan_remaining(self) -> bool:
        return self._index + 1 < len(self.task.handshake_plan)

    def _next_handshake(self, first: bool = False) -> None:
        self._index += 1
        entry = self.task.handshake_plan[self._index]
        name, variant = reg.parse_plan_entry(entry)
        payload = self.registry.payload(name, variant)
        ip, port = self.task.target
        synack = self.task.adopted_synack if first else None
        if synack is not None:
            flow = adopt(synack)
            conn = _Conn(flow.four_tuple, entry, payload, isn=seq_add(flow.our_next_seq, -1),
                         next_seq=flow.our_next_seq)
            self.t.bind(conn.key, lambda seg, c=conn: self._on_segment(c, seg))
            self._keys.append(conn.key)
            self._conn = conn
            self._on_segment(conn, synack, adopted=True)
            return
        key = self.t.open_port(self.source_ip, ip, port, lambda seg: self._on_segment(self._conn_for(seg), seg))
        conn = _Conn(key, entry, payload)
        conn.isn = self.t.new_isn()
        conn.next_seq = seq_add(conn.isn, 1)
        self._keys.append(key)
        self._conn = conn
        self._send(conn, self._syn(conn))
        self._arm(conn, self.cfg.connect_timeout)

    def _conn_for(self, seg: TcpSegment) -> Optional[_Conn]:
        conn = self._conn
        if conn is not None and conn.key == (seg.dst_ip, seg.dst_port, seg.src_ip, seg.src_port):
            return conn
        return None

    # -- wire helpers -------------------------------------------------------
    def _syn(self, conn: _Conn) -> TcpSegment:
        _, sport, ip, port = conn.key
        return segment(self.source_ip, ip, sport, port, seq=conn.isn, flags=Flags.SYN)

    def _seg(self, conn: _Conn, flags: Flags, seq: int, payload: bytes = b"") -> TcpSegment:
        _, sport, ip, port = conn.key
        return segment(self.source_ip, ip, sport, port, seq=seq, ack=conn.their_next, flags=flags, payload=payload)

    def _send(self, conn: _Conn, seg: TcpSegment) -> None:
        conn.evidence.append(Evidence.of(self.t.now(), OUT, seg))
        self.t.send(seg)

    def _arm(self, conn: _Conn, seconds: float, event: Event = Timeout()) -> None:
        if conn.timer is not None:
            conn.timer.cancel()
        conn.timer = self.t.call_later(self.cfg.scaled(seconds), lambda: self._dispatch(conn, event))

    # -- inbound ------------------------------------------------------------
    def _on_segment(self, conn: Optional[_Conn], seg: TcpSegment, adopted: bool = False) -> None:
        if conn is None or conn is not self._conn or conn.phase is FlowPhase.CLOSED:
            return
        conn.evidence.append(Evidence.of(self.t.now(), IN, seg))
        if seg.is_synack:
            if conn.phase is FlowPhase.SYN_SENT and seg.ack != conn.next_seq:
                return
            conn.synacks += 1
            conn.their_next = seq_add(seg.seq, 1)
            self._dispatch(conn, SynAckSeen(seg.window, conn.synacks))
        elif seg.payload and not seg.flags & Flags.RST and conn.phase is not FlowPhase.SYN_SENT:
            self._dispatch(conn, DataArrived(seg.payload))
        elif seg.closes:
            if seg.flags & Flags.RST:
                conn.peer_reset = True
            covers = conn.acked or (conn.phase is FlowPhase.DATA_SENT and bool(seg.flags & Flags.ACK)
                                    and seq_geq(seg.ack, conn.data_end))
            self._dispatch(conn, RstOrFin(covers))
        elif (conn.phase is FlowPhase.DATA_SENT and not conn.acked and seg.flags & Flags.ACK
              and seq_geq(seg.ack, conn.data_end)):
            # acknowledged; give the server a moment to say something
            conn.acked = True
            self._arm(conn, self.cfg.banner_timeout, AckArrived())

    # -- the state machine ----------------------------------------------------
    def _dispatch(self, conn: _Conn, event: Event) -> None:
        if conn is not self._conn or conn.phase is FlowPhase.CLOSED or self._main_done:
            return
        try:
            action = next_action(conn.phase, event, plan_remaining=self._plan_remaining(),
                                 retransmitted=conn.retransmitted)
            self._perform(conn, action)
        except TransportError as exc:
            self._fail(str(exc))

    def _perform(self, conn: _Conn, action: Action) -> None:
        if isinstance(action, SendAckWithData):
            if conn.payload:
                conn.data_end = seq_add(conn.next_seq, len(conn.payload))
                conn.phase = FlowPhase.DATA_SENT
                self._send(conn, self._seg(conn, Flags.ACK, conn.next_seq, conn.payload))
                self._arm(conn, self.cfg.ack_timeout)
            else:
                conn.phase = FlowPhase.WAITING
                self._send(conn, self._seg(conn, Flags.ACK, conn.next_seq))
                self._arm(conn, self.cfg.banner_timeout)
        elif isinstance(action, ResendAck):
            payload = conn.payload if conn.phase is FlowPhase.DATA_SENT and not conn.acked else b""
            self._send(conn, self._seg(conn, Flags.ACK, conn.next_seq, payload))
        elif isinstance(action, RetransmitSyn):
            conn.retransmitted = True
            self._send(conn, self._syn(conn))
            self._arm(conn, self.cfg.connect_timeout)
        elif isinstance(action, RetransmitWithPush):
            conn.retransmitted = True
            self._send(conn, self._seg(conn, Flags.ACK | Flags.PSH, conn.next_seq, conn.payload))
            self._arm(conn, self.cfg.ack_timeout)
        elif isinstance(action, Fingerprint):
            self._close(conn)
            name, _ = reg.parse_plan_entry(conn.entry)
            expected = name if name in self.registry and name not in (reg.WAIT, reg.AGNOSTIC) else self.expected
            if expected is not None and expected not in self.registry:
                expected = None
            result = self.registry.match(action.data, expected)
            if result and self._identified is None:
                self._identified = result
            if result and not self.cfg.exhaustive:
                self._end_main(conn)
            else:
                self._advance(conn)
        elif isinstance(action, CloseThenNextHandshake):
            self._close(conn)
            self._advance(conn)
        elif isinstance(action, Finish):
            self._close(conn)
            self._end_main(conn)
        elif isinstance(action, Abort):
            self._close(conn)
            if self.cfg.exhaustive:
                self._advance(conn)
            else:
                self._end_main(conn)
        else:  # pragma: no cover - next_action is exhaustive
            raise ProtocolViolation(conn.phase, action)

    def _close(self, conn: _Conn) -> None:
        if conn.timer is not None:
            conn.timer.cancel()
        if conn.synacks and not conn.peer_reset:
            seq = conn.data_end if conn.phase is FlowPhase.DATA_SENT else conn.next_seq
            self._send(conn, self._seg(conn, Flags.RST | Flags.ACK, seq))
        conn.phase = FlowPhase.CLOSED
        self.t.unbind(conn.key)

    def _advance(self, conn: _Conn) -> None:
        if self._plan_remaining():
            self._next_handshake()
        else:
            self._end_main(conn)

    def _end_main(self, conn: _Conn) -> None:
        self._verdict = verdict_from(conn.evidence)
        self._main_done = True
        self._maybe_complete()

    def _maybe_complete(self) -> None:
        if self.done or not self._main_done:
            return
        if self._wildcard is not None and not self._wildcard.done:
            return
        self._emit()

    def _fail(self, message: str) -> None:
        if self.done:
            return
        self._error = message
        if self._conn is not None and self._conn.phase is not FlowPhase.CLOSED:
            if self._conn.timer is not None:
                self._conn.timer.cancel()
            self._conn.phase = FlowPhase.CLOSED
            self.t.unbind(self._conn.key)
        if self._verdict is None:
            evidence = self._conn.evidence if self._conn is not None and self._conn.evidence else []
            self._verdict = verdict_from(evidence) if evidence else StateVerdict(
                Outcome.NO_ACK_HOST, RefinedState.NEVER_SYNACKED)
        self._main_done = True
        self._wildcard = None
        self._emit()

    def _emit(self) -> None:
        verdict = self._verdict
        keys = list(self._keys)
        wildcard = None
        if self._wildcard is not None:
            keys += [k for k in self._wildcard.keys if k is not None]
            wildcard = self._wildcard.label()
        behavior = mb.label_from_state(verdict, wildcard)
        found = self._identified
        protocol = found.matched_protocol if found else None
        if behavior.kind is mb.BehaviorKind.WILDCARD_ACKER:
            protocol = None
        self.record = ScanRecord(
            target=tuple(self.task.target),
            verdict=verdict,
            behavior=behavior,
            identified_protocol=protocol,
            handshakes_attempted=self._index + 1,
            packets_sent=sum(self.t.flows.sent(k) for k in keys),
            packets_received=sum(self.t.flows.received(k) for k in keys),
            wall_time=self.t.now() - self._started,
            matched_by=found.matched_by if found and protocol else None,
            flows=tuple(keys),
            error=self._error,
        )
        if self.on_done is not None:
            self.on_done(self)


# -- many targets -------------------------------------------------------------

def run(tasks: Iterable[ScanTask], config: EngineConfig, transport: Transport,
        registry: Optional[reg.Registry] = None, source_ip: Optional[str] = None) -> Iterator[ScanRecord]:
    """Scan every task, yielding records in completion order.

    Tasks are pulled lazily so that at most ``config.max_inflight`` scans
    are open at once. Each record carries a ``seq`` in emission order.
    """
    registry = registry or reg.default_registry()
    pending = iter(tasks)
    exhausted = False
    inflight: Dict[int, TargetScan] = {}
    finished: Deque[TargetScan] = deque()
    counter = itertools.count()

    def done(scan: TargetScan) -> None:
        inflight.pop(id(scan), None)
        finished.append(scan)

    while True:
        while not exhausted and len(inflight) < config.max_inflight:
            try:
                task = next(pending)
            except StopIteration:
                exhausted = True
                break
            for entry in task.handshake_plan:
                name, variant = reg.parse_plan_entry(entry)
                registry.payload(name, variant)
            scan = TargetScan(task, config, transport, registry, source_ip, on_done=done)
            inflight[id(scan)] = scan
            scan.start()
        while finished:
            record = finished.popleft().record
            record.seq = next(counter)
            yield record
        if exhausted and not inflight:
            return
        if not inflight:
            continue
        try:
            progressed = transport.step()
        except TransportError as exc:
            for scan in list(inflight.values()):
                scan._fail(str(exc))
            continue
        if not progressed:
            for scan in list(inflight.values()):
                scan._fail("event loop idle before completion")


def scan(tasks: Iterable[ScanTask], config: EngineConfig, transport: Transport,
         registry: Optional[reg.Registry] = None, source_ip: Optional[str] = None) -> List[ScanRecord]:
    return list(run(tasks, config, transport, registry, source_ip))


def plan_for(port: int, plan: Sequence[str]) -> Tuple[str, ...]:
    """Move the port's expected handshake to the front, adding it if absent.

    A server-first expected protocol leads with ``wait``. Ports with no
    expected protocol keep ``plan`` unchanged.
    """
    expected = reg.EXPECTED_BY_PORT.get(port)
    if expected is None:
        return tuple(plan)
    lead = reg.WAIT if expected in reg.SERVER_FIRST else expected
    for i, entry in enumerate(plan):
        if reg.parse_plan_entry(entry)[0] == lead:
            return (entry,) + tuple(plan[:i]) + tuple(plan[i + 1:])
    return (lead,) + tuple(plan)


def tasks_for(targets: Iterable[Target], config: EngineConfig) -> Iterator[ScanTask]:
    for target in targets:
        target = tuple(target)
        plan = plan_for(target[1], config.plan) if config.expected_first else config.plan
        yield ScanTask(target, plan, wildcard_probe_count=config.wildcard_probe_count)


# -- stateless SYN sweep (the external scanner's role, for adopt mode) ----------

class SynSweep:
    """Send one SYN per target and keep the SYN-ACKs, without answering them."""

    def __init__(self, transport: Transport, targets: Sequence[Target], *, source_ip: Optional[str] = None,
                 timeout: float = 3.0, timescale: float = 1.0):
        self.t = transport
        self.source_ip = source_ip or transport.source_ips[0]
        self.synacks: Dict[Target, TcpSegment] = {}
        self._open = 0
        for ip, port in targets:
            key = transport.open_port(self.source_ip, ip, port, self._on_segment)
            isn = transport.new_isn()
            transport.send(segment(self.source_ip, ip, key[1], port, seq=isn, flags=Flags.SYN))
            self._open += 1
            transport.call_later(timeout * timescale, lambda k=key: self._close(k))

    def _on_segment(self, seg: TcpSegment) -> None:
        target = (seg.src_ip, seg.src_port)
        if seg.is_synack and target not in self.synacks:
            self.synacks[target] = seg

    def _close(self, key: FourTuple) -> None:
        self.t.unbind(key)
        self._open -= 1

    @property
    def done(self) -> bool:
        return self._open == 0

    def run(self) -> List[TcpSegment]:
        self.t.run_until(lambda: self.done)
        return list(self.synacks.values())


def synack_csv(seg: TcpSegment) -> str:
    """One SYN-ACK in the stateless scanner's CSV layout."""
    return f"{seg.src_ip},{seg.src_port},{seg.dst_ip},{seg.dst_port},{seg.seq},{seg.ack},{seg.window}"


def parse_synack_csv(line: str, ttl: int = 64) -> TcpSegment:
    """Inverse of ``synack_csv``: saddr,sport,daddr,dport,seqnum,acknum,window."""
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != 7:
        raise ValueError(f"expected 7 fields, got {len(parts)}: {line!r}")
    saddr, sport, daddr, dport, seqnum, acknum, window = parts
    return segment(saddr, daddr, int(sport), int(dport), seq=int(seqnum), ack=int(acknum),
                   flags=Flags.SYN | Flags.ACK, window=int(window), ttl=ttl)
