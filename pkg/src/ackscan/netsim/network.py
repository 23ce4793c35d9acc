"""Deterministic in-process network on a logical clock."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from ..packet import TcpSegment, craft, frame, parse
from ..transport import Transport
from .scripts import Endpoint, EndpointScript

DEFAULT_SOURCES = ("192.0.2.1", "192.0.2.2", "192.0.2.3", "192.0.2.4")

Latency = Union[float, Tuple[float, float]]


@dataclass(frozen=True)
class NetConditions:
    loss_probability: float = 0.0
    latency: Latency = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must be within [0, 1]")
        lo, hi = self.latency_range
        if lo < 0 or hi < lo:
            raise ValueError("latency must be non-negative with lo <= hi")

    @property
    def latency_range(self) -> Tuple[float, float]:
        if isinstance(self.latency, (tuple, list)):
            return float(self.latency[0]), float(self.latency[1])
        return float(self.latency), float(self.latency)


@dataclass(frozen=True)
class LogEntry:
    sent_at: float
    direction: str  # "out" = scanner -> endpoint, "in" = endpoint -> scanner
    frame: bytes
    delivered: bool
    delivered_at: Optional[float]

    def segment(self) -> TcpSegment:
        return parse(self.frame[2:])

    def as_dict(self) -> dict:
        seg = self.segment()
        return {
            "t": round(self.sent_at, 9),
            "dir": self.direction,
            "delivered": self.delivered,
            "at": None if self.delivered_at is None else round(self.delivered_at, 9),
            "seg": seg.summary(),
            "hex": self.frame.hex(),
        }


class SimNetwork(Transport):
    """A Transport whose far side is a set of scripted endpoints."""

    def __init__(self, endpoints: Iterable[Endpoint], conditions: NetConditions = NetConditions(), *,
                 source_ips: Sequence[str] = DEFAULT_SOURCES, timescale: float = 1.0,
                 strict_checksums: bool = False, keep_log: bool = True):
        super().__init__(source_ips, seed=conditions.seed ^ 0x5EED, strict_checksums=strict_checksums)
        self.conditions = conditions
        self.timescale = timescale
        self.endpoints = {}
        for ep in endpoints:
            if ep.ip in self.endpoints:
                raise ValueError(f"duplicate endpoint ip {ep.ip}")
            self.endpoints[ep.ip] = ep
        self._net_rng = random.Random(conditions.seed)
        self._clock = 0.0
        self.keep_log = keep_log
        self.log: List[LogEntry] = []
        self.emitted = 0
        self.dropped = 0
        self.loss_draws: List[bool] = []
        self._path_clear: Dict[Tuple[str, str], float] = {}

    def now(self) -> float:
        return self._clock

    def _latency(self) -> float:
        lo, hi = self.conditions.latency_range
        value = lo if lo == hi else self._net_rng.uniform(lo, hi)
        return value * self.timescale

    def _emit(self, wire: bytes, direction: str, on_arrival) -> None:
        self.emitted += 1
        lost = self._net_rng.random() < self.conditions.loss_probability
        self.loss_draws.append(lost)
        if lost:
            self.dropped += 1
            if self.keep_log:
                self.log.append(LogEntry(self._clock, direction, frame(wire), False, None))
            return
        # segments between one pair of hosts never overtake each other
        path = (wire[12:16], wire[16:20])
        arrive = max(self._clock + self._latency(), self._path_clear.get(path, 0.0))
        self._path_clear[path] = arrive
        if self.keep_log:
            self.log.append(LogEntry(self._clock, direction, frame(wire), True, arrive))
        self.call_later(arrive - self._clock, lambda: on_arrival(wire))

    def _transmit(self, wire: bytes) -> None:
        self._emit(wire, "out", self._to_endpoint)

    def _to_endpoint(self, wire: bytes) -> None:
        seg = parse(wire)
        ep = self.endpoints.get(seg.dst_ip)
        if ep is None:
            return
        for delay, out in ep.script_step(seg, self.timescale):
            if delay <= 0:
                self._emit(craft(out), "in", self.deliver)
            else:
                self.call_later(delay, lambda w=craft(out): self._emit(w, "in", self.deliver))

    def step(self) -> bool:
        timer = self._pop_due(float("inf"))
        if timer is None:
            return False
        self._clock = max(self._clock, timer.when)
        timer.callback()
        return True

    def settle(self) -> None:
        """Run until no events remain (drains late endpoint retransmissions)."""
        while self.step():
            pass

    def log_lines(self) -> List[dict]:
        return [e.as_dict() for e in self.log]


def spawn(scenario: Iterable[Tuple[str, EndpointScript]], conditions: NetConditions = NetConditions(),
          **kwargs) -> SimNetwork:
    """Build a simulated network from (ip, script) pairs."""
    endpoints = []
    seen = set()
    for ip, script in scenario:
        if ip in seen:
            raise ValueError(f"duplicate endpoint ip {ip}")
        seen.add(ip)
        endpoints.append(Endpoint(ip, script, isn_seed=conditions.seed))
    return SimNetwork(endpoints, conditions, **kwargs)
