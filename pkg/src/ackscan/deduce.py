"""Deduce how far into a TCP session a server actually gets.

A connection is opened, two newlines are sent right after the handshake,
and the server is classified as acknowledging data (``AckHost``) or not.
Non-acknowledging servers get a refined label explaining what was seen.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

from .packet import Flags, FourTuple, TcpSegment, segment, seq_add, seq_geq
from .transport import Timer, Transport


class DeduceError(ValueError):
    pass


class Outcome(enum.Enum):
    ACK_HOST = "AckHost"
    NO_ACK_HOST = "NoAckHost"


class RefinedState(enum.Enum):
    NEVER_SYNACKED = "NeverSynAcked"
    ZERO_WINDOW = "ZeroWindowNeverOpened"
    SYNACK_LOOP = "SynAckRetransmitLoop"
    RST_AFTER_HANDSHAKE = "RstAfterHandshake"
    ESTABLISHED_NO_ACK = "EstablishedNoAck"
    ACKNOWLEDGES_DATA = "AcknowledgesData"


IN, OUT = "in", "out"


@dataclass(frozen=True)
class Evidence:
    """One segment seen on a flow, reduced to what the labeling needs."""

    time: float
    direction: str
    flags: Flags
    seq: int
    ack: int
    window: int
    ttl: int
    length: int

    @classmethod
    def of(cls, time: float, direction: str, seg: TcpSegment) -> "Evidence":
        return cls(time, direction, seg.flags, seg.seq, seg.ack, seg.window, seg.ttl, len(seg.payload))

    @property
    def is_synack(self) -> bool:
        return (self.flags & (Flags.SYN | Flags.ACK)) == (Flags.SYN | Flags.ACK)

    @property
    def closes(self) -> bool:
        return bool(self.flags & (Flags.RST | Flags.FIN))

    def summary(self) -> str:
        arrow = "<-" if self.direction == IN else "->"
        return f"{arrow} {self.flags} seq={self.seq} ack={self.ack} win={self.window} ttl={self.ttl} len={self.length}"


@dataclass(frozen=True)
class StateVerdict:
    outcome: Outcome
    refined_state: RefinedState
    evidence: Tuple[Evidence, ...] = ()
    synack_count: int = 0
    final_window: int = 0
    ttl: int = 0

    def __post_init__(self) -> None:
        if (self.outcome is Outcome.ACK_HOST) != (self.refined_state is RefinedState.ACKNOWLEDGES_DATA):
            raise DeduceError("AckHost iff AcknowledgesData")
        if self.refined_state is RefinedState.SYNACK_LOOP and self.synack_count < 2:
            raise DeduceError("SynAckRetransmitLoop needs at least two SYN-ACKs")
        if self.refined_state is RefinedState.ZERO_WINDOW and self.final_window != 0:
            raise DeduceError("ZeroWindowNeverOpened with an open window")

    def timeline(self) -> List[Tuple[float, str]]:
        return [(e.time, e.summary()) for e in self.evidence]


@dataclass
class DeduceConfig:
    probe_payload: bytes = b"\n\n"
    total_timeout: float = 100.0
    retransmit_budget: int = 8
    simulator_timescale: float = 1.0

    def __post_init__(self) -> None:
        if self.total_timeout <= 0:
            raise DeduceError("total_timeout must be positive")
        if self.retransmit_budget < 1:
            raise DeduceError("retransmit_budget must be at least 1")
        if self.simulator_timescale <= 0:
            raise DeduceError("simulator_timescale must be positive")

    @property
    def deadline(self) -> float:
        return self.total_timeout * self.simulator_timescale

    def retransmit_offsets(self) -> List[float]:
        """Send times of the retransmissions, relative to the first send.

        Exponential backoff starting at deadline / 2**budget, so all
        ``retransmit_budget`` copies go out before the deadline.
        """
        rto = self.deadline / (1 << self.retransmit_budget)
        return [rto * ((1 << k) - 1) for k in range(1, self.retransmit_budget + 1)]


def _payload_end(evidence: Sequence[Evidence]) -> Optional[Tuple[float, int]]:
    sent = [e for e in evidence if e.direction == OUT and e.length > 0]
    if not sent:
        return None
    first = sent[0]
    return first.time, seq_add(first.seq, first.length)


def label_refined(evidence: Sequence[Evidence]) -> RefinedState:
    """Map one flow's evidence onto a refined server state.

    Priority when evidence is mixed: NeverSynAcked > ZeroWindowNeverOpened >
    SynAckRetransmitLoop > RstAfterHandshake > EstablishedNoAck. A loop
    needs more SYN-ACKs than SYNs we sent. Data that
    was acknowledged (or a server that sent application bytes) wins over all
    of those except NeverSynAcked.
    """
    if not evidence:
        raise DeduceError("no evidence")
    inbound = [e for e in evidence if e.direction == IN]
    synacks = [e for e in inbound if e.is_synack]
    if not synacks:
        return RefinedState.NEVER_SYNACKED
    first_synack = synacks[0].time

    if any(e.length > 0 and not e.flags & Flags.RST and not e.flags & Flags.SYN for e in inbound):
        return RefinedState.ACKNOWLEDGES_DATA
    sent = _payload_end(evidence)
    if sent is not None:
        sent_at, end = sent
        for e in inbound:
            if e.time >= sent_at and e.flags & Flags.ACK and not e.flags & Flags.SYN and seq_geq(e.ack, end):
                return RefinedState.ACKNOWLEDGES_DATA

    windows = [e.window for e in inbound if not e.flags & Flags.RST and e.time >= first_synack]
    if windows and all(w == 0 for w in windows):
        return RefinedState.ZERO_WINDOW
    # a SYN-ACK answering one of our own SYN retransmissions is not a loop
    syns_sent = sum(1 for e in evidence if e.direction == OUT and e.flags & Flags.SYN)
    if len(synacks) >= 2 and len(synacks) > syns_sent:
        return RefinedState.SYNACK_LOOP
    if any(e.closes and e.time >= first_synack for e in inbound):
        return RefinedState.RST_AFTER_HANDSHAKE
    return RefinedState.ESTABLISHED_NO_ACK


def verdict_from(evidence: Sequence[Evidence]) -> StateVerdict:
    refined = label_refined(evidence)
    inbound = [e for e in evidence if e.direction == IN]
    synacks = [e for e in inbound if e.is_synack]
    windows = [e.window for e in inbound if not e.flags & Flags.RST]
    outcome = Outcome.ACK_HOST if refined is RefinedState.ACKNOWLEDGES_DATA else Outcome.NO_ACK_HOST
    return StateVerdict(
        outcome=outcome,
        refined_state=refined,
        evidence=tuple(evidence),
        synack_count=len(synacks),
        final_window=windows[-1] if windows else 0,
        ttl=synacks[-1].ttl if synacks else 0,
    )


class Deduction:
    """One run of the deduction procedure against a single (ip, port)."""

    def __init__(self, transport: Transport, target: Tuple[str, int], config: DeduceConfig,
                 source_ip: Optional[str] = None, on_done: Optional[Callable[["Deduction"], None]] = None):
        self.t = transport
        self.on_done = on_done
        self.target = target
        self.cfg = config
        self.source_ip = source_ip or transport.source_ips[0]
        self.evidence: List[Evidence] = []
        self.verdict: Optional[StateVerdict] = None
        self.key: Optional[FourTuple] = None
        self._timers: List[Timer] = []
        self._isn = 0
        self._next_seq = 0
        self._their_next = 0
        self._data_sent = False
        self._data_end = 0
        self._synack_seen = False

    @property
    def done(self) -> bool:
        return self.verdict is not None

    def _send(self, seg: TcpSegment) -> None:
        self.evidence.append(Evidence.of(self.t.now(), OUT, seg))
        self.t.send(seg)

    def _seg(self, flags: Flags, seq: int, payload: bytes = b"") -> TcpSegment:
        ip, port = self.target
        return segment(self.source_ip, ip, self.key[1], port, seq=seq, ack=self._their_next,
                       flags=flags, payload=payload)

    def _arm(self, offsets: Iterable[float], action) -> None:
        for off in offsets:
            self._timers.append(self.t.call_later(off, action))

    def _cancel(self) -> None:
        for timer in self._timers:
            timer.cancel()
        self._timers.clear()

    def start(self) -> "Deduction":
        ip, port = self.target
        self.key = self.t.open_port(self.source_ip, ip, port, self.on_segment)
        self._isn = self.t.new_isn()
        self._next_seq = seq_add(self._isn, 1)
        syn = segment(self.source_ip, ip, self.key[1], port, seq=self._isn, flags=Flags.SYN)
        self._send(syn)
        self._arm(self.cfg.retransmit_offsets(), lambda: self._resend_syn(syn))
        self._timers.append(self.t.call_later(self.cfg.deadline, self._finish))
        return self

    def _resend_syn(self, syn: TcpSegment) -> None:
        if not self._synack_seen and not self.done:
            self._send(syn)

    def _send_data(self) -> None:
        payload = self.cfg.probe_payload
        data = self._seg(Flags.ACK, self._next_seq, payload)
        self._data_end = seq_add(self._next_seq, len(payload))
        self._data_sent = True
        self._send(data)
        self._arm(self.cfg.retransmit_offsets(), lambda: self._retransmit(data))
        self._timers.append(self.t.call_later(self.cfg.deadline, self._finish))

    def _retransmit(self, seg: TcpSegment) -> None:
        if not self.done:
            self._send(seg)

    def _probe_window(self) -> None:
        if not self.done and not self._data_sent:
            self._send(self._seg(Flags.ACK, self._next_seq))

    def on_segment(self, seg: TcpSegment) -> None:
        if self.done:
            return
        self.evidence.append(Evidence.of(self.t.now(), IN, seg))
        if not self._synack_seen:
            if seg.is_synack and seg.ack == self._next_seq:
                self._synack_seen = True
                self._cancel()
                self._their_next = seq_add(seg.seq, 1)
                if seg.window > 0:
                    self._send_data()
                else:
                    self._send(self._seg(Flags.ACK, self._next_seq))
                    self._arm(self.cfg.retransmit_offsets(), self._probe_window)
                    self._timers.append(self.t.call_later(self.cfg.deadline, self._finish))
            elif seg.closes:
                self._finish()
            return

        if seg.is_synack:
            # duplicate SYN-ACK: our ACK was lost or ignored
            self._send(self._seg(Flags.ACK, self._next_seq))
            return
        if seg.flags & Flags.ACK and self._data_sent and seq_geq(seg.ack, self._data_end):
            self._finish(reset=not seg.closes)
            return
        if seg.closes:
            self._finish()
            return
        if not self._data_sent and seg.window > 0:
            self._cancel()
            self._send_data()

    def _finish(self, reset: bool = False) -> None:
        if self.done:
            return
        self._cancel()
        if reset:
            self._send(self._seg(Flags.RST | Flags.ACK, self._data_end if self._data_sent else self._next_seq))
        self.t.unbind(self.key)
        self.verdict = verdict_from(self.evidence)
        if self.on_done is not None:
            self.on_done(self)


def deduce(target: Tuple[str, int], config: DeduceConfig, transport: Transport,
           source_ip: Optional[str] = None) -> StateVerdict:
    """Run the deduction procedure against one target and block until it ends.

    Transport failures raise ``TransportError``; they are never folded into
    a NoAckHost verdict.
    """
    run = Deduction(transport, target, config, source_ip).start()
    transport.run_until(lambda: run.done)
    return run.verdict


def deduce_many(targets: Iterable[Tuple[str, int]], config: DeduceConfig, transport: Transport,
                source_ip: Optional[str] = None) -> List[StateVerdict]:
    runs = [Deduction(transport, t, config, source_ip).start() for t in targets]
    transport.run_until(lambda: all(r.done for r in runs))
    return [r.verdict for r in runs]
