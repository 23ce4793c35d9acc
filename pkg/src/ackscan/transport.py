"""Event loop and transports shared by the engine, deduction and probes.

Everything above this layer is written against ``Transport``: a clock,
one-shot timers, ``send`` for outbound segments and a ``FlowTable`` that
routes inbound segments by exact four-tuple. The simulator drives the
loop on a logical clock; live mode drives it from a raw socket.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import selectors
import socket
import time
from typing import Callable, Iterable, List, Optional, Sequence

from .packet import FlowTable, FourTuple, Handler, PacketError, TcpSegment, craft, parse

log = logging.getLogger(__name__)

EPHEMERAL_LOW = 32768
EPHEMERAL_HIGH = 60999


class TransportError(RuntimeError):
    """The transport itself failed (socket error, closed loop, ...)."""


class Timer:
    __slots__ = ("when", "callback", "cancelled")

    def __init__(self, when: float, callback: Callable[[], None]):
        self.when = when
        self.callback = callback
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Transport:
    """Timer heap + flow table. Subclasses supply the clock and the wire."""

    def __init__(self, source_ips: Sequence[str], *, seed: int = 0, strict_checksums: bool = False):
        if not source_ips:
            raise ValueError("at least one source address is required")
        self.source_ips = tuple(source_ips)
        self.flows = FlowTable()
        self.strict_checksums = strict_checksums
        self.rng = random.Random(seed)
        self._timers: List[tuple] = []
        self._tie = itertools.count()

    # -- clock & timers -------------------------------------------------
    def now(self) -> float:
        raise NotImplementedError

    def call_later(self, delay: float, callback: Callable[[], None]) -> Timer:
        timer = Timer(self.now() + max(0.0, delay), callback)
        heapq.heappush(self._timers, (timer.when, next(self._tie), timer))
        return timer

    def _pop_due(self, horizon: float) -> Optional[Timer]:
        while self._timers and self._timers[0][2].cancelled:
            heapq.heappop(self._timers)
        if self._timers and self._timers[0][0] <= horizon:
            return heapq.heappop(self._timers)[2]
        return None

    def _next_deadline(self) -> Optional[float]:
        while self._timers and self._timers[0][2].cancelled:
            heapq.heappop(self._timers)
        return self._timers[0][0] if self._timers else None

    # -- flows ----------------------------------------------------------
    def bind(self, key: FourTuple, handler: Handler) -> None:
        self.flows.bind(key, handler)

    def unbind(self, key: FourTuple) -> None:
        self.flows.unbind(key)

    def open_port(self, local_ip: str, remote_ip: str, remote_port: int, handler: Handler) -> FourTuple:
        """Pick a never-used ephemeral source port and bind the resulting flow.

        Four-tuples are not recycled, so per-flow packet counters stay exact
        and late segments from an old connection cannot leak into a new one.
        """
        for _ in range(64):
            port = self.rng.randint(EPHEMERAL_LOW, EPHEMERAL_HIGH)
            key = (local_ip, port, remote_ip, remote_port)
            if key not in self.flows.counters:
                self.bind(key, handler)
                return key
        raise TransportError("no free source port")

    def new_isn(self) -> int:
        return self.rng.getrandbits(32)

    def send(self, seg: TcpSegment) -> None:
        self.flows.count_sent(seg)
        self._transmit(craft(seg))

    def deliver(self, wire: bytes) -> None:
        try:
            seg = parse(wire, strict=self.strict_checksums)
        except PacketError as exc:
            log.debug("dropping unparsable segment: %s", exc)
            return
        self.flows.dispatch(seg)

    def _transmit(self, wire: bytes) -> None:
        raise NotImplementedError

    # -- driving --------------------------------------------------------
    def step(self) -> bool:
        """Run the next due event. Returns False when nothing is pending."""
        raise NotImplementedError

    def run_until(self, done: Callable[[], bool]) -> None:
        while not done():
            if not self.step():
                if done():
                    return
                raise TransportError("event loop idle before completion")


class LiveTransport(Transport):
    """Raw-socket transport for real networks.

    Needs CAP_NET_RAW, and the kernel must be kept from answering adopted
    SYN-ACKs with RSTs, e.g.::

        iptables -A OUTPUT -p tcp --tcp-flags RST RST -s <source-ip> -j DROP
    """

    def __init__(self, source_ips: Sequence[str], *, seed: int = 0,
                 strict_checksums: bool = False, sock: Optional[socket.socket] = None):
        super().__init__(source_ips, seed=seed, strict_checksums=strict_checksums)
        if sock is None:
            try:
                sock = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_TCP)
                sock.setsockopt(socket.IPPROTO_IP, socket.IP_HDRINCL, 1)
            except OSError as exc:
                raise TransportError(f"cannot open raw socket: {exc}") from exc
        sock.setblocking(False)
        self.sock = sock
        self._sel = selectors.DefaultSelector()
        self._sel.register(sock, selectors.EVENT_READ)
        self._local = set(source_ips)

    def now(self) -> float:
        return time.monotonic()

    def _transmit(self, wire: bytes) -> None:
        dst = socket.inet_ntoa(wire[16:20])
        try:
            self.sock.sendto(wire, (dst, 0))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def step(self) -> bool:
        timer = self._pop_due(self.now())
        if timer is not None:
            timer.callback()
            return True
        deadline = self._next_deadline()
        if deadline is None and not self.flows.handlers:
            return False
        wait = 1.0 if deadline is None else max(0.0, deadline - self.now())
        for _key, _ in self._sel.select(wait):
            try:
                wire = self.sock.recv(65535)
            except BlockingIOError:
                continue
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if len(wire) >= 20 and socket.inet_ntoa(wire[16:20]) in self._local:
                self.deliver(wire)
        return True

    def close(self) -> None:
        self._sel.close()
        self.sock.close()


def drain(transport: Transport, pending: Iterable[Callable[[], bool]]) -> None:
    """Step the loop until every completion predicate holds."""
    checks = list(pending)
    transport.run_until(lambda: all(c() for c in checks))
