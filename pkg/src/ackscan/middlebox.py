"""Detectors for defenses that only show up across several probes.

The deciders (``shunning_label``, ``dynamic_block_label``, ``ttl_mismatch``,
``network_granularity``) are pure. The ``detect_*`` functions run probes
over a ``Transport`` and feed the deciders.
"""

from __future__ import annotations

import enum
import ipaddress
import random
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .deduce import DeduceConfig, Deduction, Evidence, IN, Outcome, RefinedState, StateVerdict
from .packet import Flags, TcpSegment, segment, seq_add
from .transport import Timer, Transport

Target = Tuple[str, int]


class MiddleboxError(ValueError):
    pass


class BehaviorKind(enum.Enum):
    CONNECTION_SHUNNING = "ConnectionShunning"
    DYNAMIC_BLOCK = "DynamicBlockAfterHandshake"
    ZERO_WINDOW = "ZeroWindowProtection"
    MID_HANDSHAKE_DROP = "MidHandshakeDrop"
    RST_AFTER_HANDSHAKE = "RstAfterHandshake"
    WILDCARD_ACKER = "WildcardAcker"
    NONE = "NoDefenseObserved"


class Granularity(enum.Enum):
    HOST = "Host"
    NETWORK = "Network"
    UNKNOWN = "Unknown"


MIN_SUPPORT = {
    BehaviorKind.CONNECTION_SHUNNING: 2,
    BehaviorKind.DYNAMIC_BLOCK: 2,
    BehaviorKind.WILDCARD_ACKER: 5,
}


@dataclass(frozen=True)
class BehaviorLabel:
    kind: BehaviorKind = BehaviorKind.NONE
    granularity_hint: Granularity = Granularity.UNKNOWN
    supporting_probes: int = 1

    def __post_init__(self) -> None:
        need = MIN_SUPPORT.get(self.kind, 1)
        if self.supporting_probes < need:
            raise MiddleboxError(f"{self.kind.value} needs at least {need} supporting probes")

    def with_granularity(self, hint: Granularity) -> "BehaviorLabel":
        return BehaviorLabel(self.kind, hint, self.supporting_probes)


NO_DEFENSE = BehaviorLabel()


class ProbeResponse(enum.Enum):
    SYNACK = "SynAck"
    RST = "Rst"
    SILENCE = "Silence"


@dataclass(frozen=True)
class TwoSourceProbeResult:
    used_ip_response: ProbeResponse
    fresh_ip_response: ProbeResponse


# -- pure deciders --------------------------------------------------------

def shunning_label(result: TwoSourceProbeResult) -> BehaviorLabel:
    """Used source ignored or reset while a fresh source is answered.

    Silence on both sources is churn or an outage, not shunning.
    """
    if result.fresh_ip_response is ProbeResponse.SYNACK and \
            result.used_ip_response in (ProbeResponse.SILENCE, ProbeResponse.RST):
        return BehaviorLabel(BehaviorKind.CONNECTION_SHUNNING, supporting_probes=2)
    return NO_DEFENSE


def dynamic_block_label(result: TwoSourceProbeResult) -> BehaviorLabel:
    """Fresh source still gets a handshake after the used one sent data."""
    if result.fresh_ip_response is ProbeResponse.SYNACK and \
            result.used_ip_response in (ProbeResponse.SILENCE, ProbeResponse.RST):
        return BehaviorLabel(BehaviorKind.DYNAMIC_BLOCK, supporting_probes=2)
    return NO_DEFENSE


_STATE_KIND = {
    RefinedState.ZERO_WINDOW: BehaviorKind.ZERO_WINDOW,
    RefinedState.SYNACK_LOOP: BehaviorKind.MID_HANDSHAKE_DROP,
    RefinedState.RST_AFTER_HANDSHAKE: BehaviorKind.RST_AFTER_HANDSHAKE,
}


def label_from_state(verdict: StateVerdict, wildcard: Optional[BehaviorLabel] = None) -> BehaviorLabel:
    """Behavior visible from a single scan: the refined state plus an optional wildcard check."""
    if wildcard is not None and wildcard.kind is BehaviorKind.WILDCARD_ACKER:
        return wildcard
    kind = _STATE_KIND.get(verdict.refined_state)
    return BehaviorLabel(kind) if kind is not None else NO_DEFENSE


def classify(verdict: StateVerdict, *, shunning: Optional[TwoSourceProbeResult] = None,
             dynamic: Optional[TwoSourceProbeResult] = None,
             wildcard: Optional[BehaviorLabel] = None) -> BehaviorLabel:
    """Combine one target's scan verdict with whatever two-source probes were run.

    ``shunning`` is a probe taken after the used source was only SYN-ACKed
    (or after it was served); ``dynamic`` one taken after the used source
    sent data that was never acknowledged. A dynamic-block probe only
    counts for hosts that completed the handshake without acknowledging.
    """
    if shunning is not None:
        label = shunning_label(shunning)
        if label.kind is not BehaviorKind.NONE:
            return label
    base = label_from_state(verdict, wildcard)
    if base.kind is not BehaviorKind.NONE:
        return base
    if dynamic is not None and verdict.refined_state is RefinedState.ESTABLISHED_NO_ACK:
        return dynamic_block_label(dynamic)
    return NO_DEFENSE


def ttl_mismatch(evidence: Sequence[Evidence]) -> bool:
    """Max inbound TTL at least twice the min: two different senders on one flow."""
    ttls = [e.ttl for e in evidence if e.direction == IN]
    if len(ttls) < 2:
        return False
    return max(ttls) >= 2 * min(ttls)


def _runs(ints: Sequence[int]) -> List[Tuple[int, int]]:
    """Maximal runs of consecutive integers as half-open [lo, hi) ranges."""
    runs: List[Tuple[int, int]] = []
    for n in ints:
        if runs and runs[-1][1] == n:
            runs[-1] = (runs[-1][0], n + 1)
        else:
            runs.append((n, n + 1))
    return runs


def _block_prefixes(lo: int, hi: int) -> Iterator[int]:
    """Split a run into power-of-two sized blocks, largest first, none bigger than a /8."""
    while lo < hi:
        size = min(1 << ((hi - lo).bit_length() - 1), 1 << 24)
        yield 33 - size.bit_length()
        lo += size


def _ints(ips: Iterable[str]) -> List[int]:
    return sorted({int(ipaddress.IPv4Address(ip)) for ip in ips})


def network_granularity(ips: Iterable[str]) -> Dict[int, int]:
    """Histogram {prefix length: block count} over maximal runs of consecutive IPs.

    Each run is split into power-of-two sized blocks, largest first, so a
    run of 12 addresses counts as one /29 and one /30. Runs longer than a
    /8 are reported as several /8s.
    """
    hist: Counter = Counter()
    for lo, hi in _runs(_ints(ips)):
        hist.update(_block_prefixes(lo, hi))
    return {p: hist[p] for p in sorted(hist, reverse=True)}


def run_length(ip: str, ips: Iterable[str]) -> int:
    """Length of the run of consecutive addresses around ``ip``."""
    addr = int(ipaddress.IPv4Address(ip))
    for lo, hi in _runs(_ints(list(ips) + [ip])):
        if lo <= addr < hi:
            return hi - lo
    raise AssertionError("unreachable")


def granularity_hint(ip: str, same_kind_ips: Iterable[str]) -> Granularity:
    """Host if no adjacent address shares the behavior, Network otherwise."""
    return Granularity.HOST if run_length(ip, same_kind_ips) == 1 else Granularity.NETWORK


# -- probes ---------------------------------------------------------------

@dataclass
class ProbeConfig:
    timeout: float = 2.0
    attempts: int = 4
    timescale: float = 1.0


class SynProbe:
    """Send a SYN (retrying on silence) and report how the target answered."""

    def __init__(self, transport: Transport, source_ip: str, target: Target, config: ProbeConfig):
        self.t = transport
        self.source_ip = source_ip
        self.target = target
        self.cfg = config
        self.result: Optional[ProbeResponse] = None
        self.sent = 0
        self._key = None
        self._timer: Optional[Timer] = None
        self._isn = 0

    @property
    def done(self) -> bool:
        return self.result is not None

    def start(self) -> "SynProbe":
        ip, port = self.target
        self._key = self.t.open_port(self.source_ip, ip, port, self.on_segment)
        self._isn = self.t.new_isn()
        self._attempt()
        return self

    def _attempt(self) -> None:
        if self.done:
            return
        if self.sent >= self.cfg.attempts:
            self._finish(ProbeResponse.SILENCE)
            return
        ip, port = self.target
        self.sent += 1
        self.t.send(segment(self.source_ip, ip, self._key[1], port, seq=self._isn, flags=Flags.SYN))
        self._timer = self.t.call_later(self.cfg.timeout * self.cfg.timescale, self._attempt)

    def on_segment(self, seg: TcpSegment) -> None:
        if self.done or seg.ack != seq_add(self._isn, 1):
            return
        if seg.is_synack:
            ip, port = self.target
            self.t.send(segment(self.source_ip, ip, self._key[1], port, seq=seq_add(self._isn, 1), flags=Flags.RST))
            self._finish(ProbeResponse.SYNACK)
        elif seg.flags & Flags.RST:
            self._finish(ProbeResponse.RST)

    def _finish(self, result: ProbeResponse) -> None:
        if self._timer is not None:
            self._timer.cancel()
        self.t.unbind(self._key)
        self.result = result


class TwoSourceProbe:
    def __init__(self, transport: Transport, target: Target, used_ip: str, fresh_ip: str,
                 config: Optional[ProbeConfig] = None):
        if used_ip == fresh_ip:
            raise MiddleboxError("two-source probing needs distinct source addresses")
        cfg = config or ProbeConfig()
        self.used = SynProbe(transport, used_ip, target, cfg)
        self.fresh = SynProbe(transport, fresh_ip, target, cfg)

    def start(self) -> "TwoSourceProbe":
        self.used.start()
        self.fresh.start()
        return self

    @property
    def done(self) -> bool:
        return self.used.done and self.fresh.done

    @property
    def result(self) -> TwoSourceProbeResult:
        return TwoSourceProbeResult(self.used.result, self.fresh.result)


def _two_source(target: Target, transport: Transport, used_ip: Optional[str], fresh_ip: Optional[str],
                config: Optional[ProbeConfig]) -> TwoSourceProbeResult:
    sources = transport.source_ips
    used = used_ip or sources[0]
    fresh = fresh_ip or (sources[1] if len(sources) > 1 else used)
    probe = TwoSourceProbe(transport, target, used, fresh, config).start()
    transport.run_until(lambda: probe.done)
    return probe.result


def detect_shunning(target: Target, transport: Transport, *, used_ip: Optional[str] = None,
                    fresh_ip: Optional[str] = None, config: Optional[ProbeConfig] = None) -> BehaviorLabel:
    """Probe ``target`` (which has already SYN-ACKed ``used_ip``) from both sources."""
    return shunning_label(_two_source(target, transport, used_ip, fresh_ip, config))


def detect_dynamic_block(target: Target, transport: Transport, *, used_ip: Optional[str] = None,
                         fresh_ip: Optional[str] = None, config: Optional[ProbeConfig] = None) -> BehaviorLabel:
    """Probe ``target`` (which got data from ``used_ip`` and never acked it) from both sources."""
    return dynamic_block_label(_two_source(target, transport, used_ip, fresh_ip, config))


# -- wildcard acknowledgment ---------------------------------------------

# IANA-registered TCP ports inside the ephemeral range (a partial list); never probed.
ASSIGNED_HIGH_PORTS = frozenset({
    32768, 32896, 33060, 33123, 33331, 33333, 33434, 33656, 34249, 34378, 34379, 34962, 34963, 34964,
    34980, 35000, 35001, 35354, 35355, 35356, 35357, 36001, 36411, 36462, 36524, 36602, 36700,
    36865, 37472, 37475, 37483, 37601, 37654, 38000, 38001, 38201, 38202, 38203, 38412, 38422,
    38462, 38472, 38800, 38865, 39681, 40000, 40023, 40404, 40841, 40842, 40843, 40853, 41111,
    41121, 41230, 41794, 41795, 41796, 41797, 42508, 42509, 42510, 43000, 43188, 43189, 43190,
    43191, 43210, 43438, 43439, 43440, 43441, 44123, 44321, 44322, 44323, 44444, 44544, 44553,
    44600, 44818, 44900, 45000, 45001, 45002, 45045, 45054, 45514, 45678, 45824, 45825, 45966,
    46336, 46998, 46999, 47000, 47001, 47100, 47557, 47624, 47806, 47808, 47809, 48000, 48001,
    48002, 48003, 48049, 48128, 48129, 48556, 48619, 48653, 49000, 49001, 49150, 49151,
})


def ephemeral_ports(n: int, rng: random.Random, exclude: Iterable[int] = ()) -> List[int]:
    """``n`` distinct random ports from 32768-65535, skipping assigned ones."""
    if n < 0:
        raise MiddleboxError("probe count must be non-negative")
    banned = ASSIGNED_HIGH_PORTS | set(exclude)
    ports: List[int] = []
    while len(ports) < n:
        port = rng.randint(32768, 65535)
        if port not in banned and port not in ports:
            ports.append(port)
    return ports


WILDCARD_PROBE = DeduceConfig(total_timeout=4.0, retransmit_budget=1)


class WildcardCheck:
    """Send data to ``n`` random ephemeral ports and count acknowledgments."""

    def __init__(self, transport: Transport, ip: str, n: int, *, rng: random.Random,
                 exclude: Iterable[int] = (), threshold: Optional[int] = None,
                 config: DeduceConfig = WILDCARD_PROBE, source_ip: Optional[str] = None,
                 on_done: Optional[Callable[["WildcardCheck"], None]] = None):
        if n < 1:
            raise MiddleboxError("wildcard check needs at least one port")
        self.threshold = n if threshold is None else threshold
        self.ports = ephemeral_ports(n, rng, exclude)
        self.on_done = on_done
        self.runs = [Deduction(transport, (ip, p), config, source_ip, on_done=self._one_done) for p in self.ports]

    def _one_done(self, _run: Deduction) -> None:
        if self.done and self.on_done is not None:
            self.on_done(self)

    def start(self) -> "WildcardCheck":
        for run in self.runs:
            run.start()
        return self

    @property
    def done(self) -> bool:
        return all(r.done for r in self.runs)

    @property
    def acked(self) -> int:
        return sum(r.verdict.outcome is Outcome.ACK_HOST for r in self.runs)

    @property
    def positive(self) -> bool:
        return self.acked >= self.threshold

    @property
    def keys(self) -> List[tuple]:
        return [r.key for r in self.runs]

    def label(self) -> BehaviorLabel:
        # fewer than five ports is too little support for a label, even if all acked
        if self.positive and len(self.runs) >= MIN_SUPPORT[BehaviorKind.WILDCARD_ACKER]:
            return BehaviorLabel(BehaviorKind.WILDCARD_ACKER, supporting_probes=len(self.runs))
        return NO_DEFENSE


def detect_wildcard(ip: str, n: int, transport: Transport, *, rng: Optional[random.Random] = None,
                    exclude: Iterable[int] = (), threshold: Optional[int] = None,
                    timescale: float = 1.0) -> bool:
    """True if ``ip`` acknowledges data on at least ``threshold`` (default all) of ``n`` ephemeral ports."""
    cfg = DeduceConfig(WILDCARD_PROBE.probe_payload, WILDCARD_PROBE.total_timeout,
                       WILDCARD_PROBE.retransmit_budget, timescale)
    check = WildcardCheck(transport, ip, n, rng=rng or random.Random(0), exclude=exclude,
                          threshold=threshold, config=cfg).start()
    transport.run_until(lambda: check.done)
    return check.positive
