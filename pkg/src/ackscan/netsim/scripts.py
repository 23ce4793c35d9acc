"""Scripted server endpoints.

Each behavior is a deterministic caricature of a defense or service
observed in Internet scans:

* ``honest``: a real service; server-first protocols send their banner on
  connect, client-first ones answer probes per ``responses``.
* ``zero_window``: SYN-cookie proxy answering every SYN with window 0 and
  never opening it.
* ``shunner``: stops answering a source address after its first SYN-ACK
  (``on_synack``) or after serving its first connection (``on_data``).
* ``dynamic_blocker``: completes handshakes, never acknowledges data, and
  ignores the source address once it has sent data.
* ``non_acker``: like dynamic_blocker but answers every source forever.
* ``mid_handshake_dropper``: keeps retransmitting SYN-ACKs and ignores the
  client's ACKs; the first SYN-ACK carries the server's TTL, the
  retransmissions come from a closer middlebox.
* ``rst_after_handshake``: resets (or FINs) as soon as the handshake
  completes.
* ``wildcard_acker``: acknowledges data on every port and speaks nothing.
* ``option_sensitive``: a service answering only one probe variant.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .. import registry as reg
from ..packet import Flags, TcpSegment, segment, seq_add
from . import responses

SYNACK_WINDOW = 29200


class Behavior(enum.Enum):
    HONEST = "honest"
    ZERO_WINDOW = "zero_window"
    SHUNNER = "shunner"
    DYNAMIC_BLOCKER = "dynamic_blocker"
    NON_ACKER = "non_acker"
    MID_HANDSHAKE_DROPPER = "mid_handshake_dropper"
    RST_AFTER_HANDSHAKE = "rst_after_handshake"
    WILDCARD_ACKER = "wildcard_acker"
    OPTION_SENSITIVE = "option_sensitive"


@dataclass(frozen=True)
class EndpointScript:
    behavior: Behavior
    ports: Tuple[int, ...] = ()
    protocol: Optional[str] = None
    trigger: str = "on_synack"
    blocked_reply: str = "silence"
    synack_retx: int = 8
    synack_interval: float = 3.0
    ttl_low: int = 57
    ttl_high: int = 118
    silent_after_ack: bool = True
    accept_variant: Optional[str] = None
    close_with: str = "rst"
    closed_reply: str = "rst"
    ttl: int = 52
    ack_fraction: float = 1.0
    excluded_ports: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        b = self.behavior
        if b is Behavior.MID_HANDSHAKE_DROPPER and self.ttl_high < 2 * self.ttl_low:
            raise ValueError("mid_handshake_dropper needs ttl_high >= 2 * ttl_low")
        if b in (Behavior.HONEST, Behavior.OPTION_SENSITIVE) and not self.protocol:
            raise ValueError(f"{b.value} needs a protocol")
        if b is Behavior.OPTION_SENSITIVE and not self.accept_variant:
            raise ValueError("option_sensitive needs accept_variant")
        if self.trigger not in ("on_synack", "on_data"):
            raise ValueError(f"unknown shunner trigger {self.trigger!r}")
        if self.blocked_reply not in ("silence", "rst"):
            raise ValueError(f"unknown blocked_reply {self.blocked_reply!r}")
        if self.close_with not in ("rst", "fin"):
            raise ValueError(f"unknown close_with {self.close_with!r}")
        if self.closed_reply not in ("rst", "fin", "silence"):
            raise ValueError(f"unknown closed_reply {self.closed_reply!r}")
        if not 0.0 <= self.ack_fraction <= 1.0:
            raise ValueError("ack_fraction must be within [0, 1]")

    def active_on(self, port: int) -> bool:
        if self.behavior in (Behavior.WILDCARD_ACKER, Behavior.ZERO_WINDOW) and not self.ports:
            return port not in self.excluded_ports
        return port in self.ports


@dataclass
class Conn:
    isn: int
    client_isn: int
    rcv_next: int = 0
    snd_next: int = 0
    established: bool = False
    responded: bool = False
    reply: bytes = b""


Out = List[Tuple[float, TcpSegment]]


@dataclass
class Endpoint:
    """Server-side state for one simulated IP."""

    ip: str
    script: EndpointScript
    isn_seed: int = 0
    conns: Dict[Tuple[str, int, int], Conn] = field(default_factory=dict)
    blocked: Set[str] = field(default_factory=set)
    registry: reg.Registry = field(default_factory=reg.default_registry)
    _isn_counter: int = 0

    def _isn(self) -> int:
        self._isn_counter += 1
        digest = hashlib.blake2b(f"{self.ip}:{self.isn_seed}:{self._isn_counter}".encode(), digest_size=4).digest()
        return int.from_bytes(digest, "big")

    def _port_acks(self, port: int) -> bool:
        s = self.script
        if s.ack_fraction >= 1.0:
            return True
        digest = hashlib.blake2b(f"{self.ip}:{port}".encode(), digest_size=8).digest()
        return int.from_bytes(digest, "big") / 2**64 < s.ack_fraction

    def _reply(self, inbound: TcpSegment, flags: Flags, *, seq: int, ack: int = 0, window: int = SYNACK_WINDOW,
               payload: bytes = b"", ttl: Optional[int] = None) -> TcpSegment:
        return segment(self.ip, inbound.src_ip, inbound.dst_port, inbound.src_port, seq=seq, ack=ack,
                       flags=flags, window=window, ttl=self.script.ttl if ttl is None else ttl, payload=payload)

    def _closed(self, seg: TcpSegment) -> Out:
        kind = self.script.closed_reply
        if kind == "silence" or seg.flags & Flags.RST:
            return []
        ack = seq_add(seg.seq, len(seg.payload) + (1 if seg.flags & Flags.SYN else 0))
        flags = Flags.RST | Flags.ACK if kind == "rst" else Flags.FIN | Flags.ACK
        return [(0.0, self._reply(seg, flags, seq=0, ack=ack, window=0))]

    def _blocked_reply(self, seg: TcpSegment) -> Out:
        if self.script.blocked_reply == "rst" and seg.flags & Flags.SYN:
            return [(0.0, self._reply(seg, Flags.RST | Flags.ACK, seq=0, ack=seq_add(seg.seq, 1), window=0))]
        return []

    def script_step(self, seg: TcpSegment, timescale: float = 1.0) -> Out:
        """Outbound segments (with send delays) caused by one inbound segment."""
        s = self.script
        key = (seg.src_ip, seg.src_port, seg.dst_port)
        if seg.src_ip in self.blocked:
            return self._blocked_reply(seg)
        if not s.active_on(seg.dst_port):
            self.conns.pop(key, None)
            return self._closed(seg)

        if seg.flags & Flags.RST:
            self.conns.pop(key, None)
            return []

        if seg.flags & Flags.SYN and not seg.flags & Flags.ACK:
            return self._on_syn(key, seg, timescale)

        conn = self.conns.get(key)
        if conn is None or not seg.flags & Flags.ACK:
            return []
        if not conn.established:
            if seg.ack != seq_add(conn.isn, 1):
                return []
            conn.established = True
            conn.snd_next = seq_add(conn.isn, 1)
            return self._on_established(key, conn, seg)
        return self._on_data(key, conn, seg)

    def _synack(self, seg: TcpSegment, conn: Conn, *, window: int = SYNACK_WINDOW, ttl: Optional[int] = None) -> TcpSegment:
        return self._reply(seg, Flags.SYN | Flags.ACK, seq=conn.isn, ack=seq_add(seg.seq, 1), window=window, ttl=ttl)

    def _on_syn(self, key, seg: TcpSegment, timescale: float) -> Out:
        s = self.script
        conn = self.conns.get(key)
        if conn is not None and conn.client_isn == seg.seq:
            if s.behavior is Behavior.MID_HANDSHAKE_DROPPER or conn.established:
                return []
            window = 0 if s.behavior is Behavior.ZERO_WINDOW else SYNACK_WINDOW
            return [(0.0, self._synack(seg, conn, window=window))]

        conn = Conn(isn=self._isn(), client_isn=seg.seq, rcv_next=seq_add(seg.seq, 1))
        self.conns[key] = conn
        b = s.behavior
        if b is Behavior.ZERO_WINDOW:
            return [(0.0, self._synack(seg, conn, window=0))]
        if b is Behavior.MID_HANDSHAKE_DROPPER:
            out = [(0.0, self._synack(seg, conn, ttl=s.ttl_high))]
            for i in range(1, s.synack_retx + 1):
                out.append((i * s.synack_interval * timescale, self._synack(seg, conn, ttl=s.ttl_low)))
            return out
        out = [(0.0, self._synack(seg, conn))]
        if b is Behavior.SHUNNER and s.trigger == "on_synack":
            self.blocked.add(seg.src_ip)
        return out

    def _service_protocol(self) -> Optional[str]:
        return self.script.protocol

    def _on_established(self, key, conn: Conn, seg: TcpSegment) -> Out:
        s = self.script
        b = s.behavior
        if b is Behavior.ZERO_WINDOW or b is Behavior.MID_HANDSHAKE_DROPPER:
            return []
        if b is Behavior.RST_AFTER_HANDSHAKE:
            self.conns.pop(key, None)
            if s.close_with == "rst":
                return [(0.0, self._reply(seg, Flags.RST, seq=seg.ack, window=0))]
            return [(0.0, self._reply(seg, Flags.FIN | Flags.ACK, seq=seg.ack, ack=conn.rcv_next))]
        out: Out = []
        proto = self._service_protocol()
        if b in (Behavior.HONEST, Behavior.SHUNNER) and proto in responses.BANNERS:
            banner = responses.BANNERS[proto]
            conn.reply = banner
            conn.responded = True
            out.append((0.0, self._reply(seg, Flags.ACK | Flags.PSH, seq=conn.snd_next,
                                         ack=seq_add(conn.rcv_next, len(seg.payload)), payload=banner)))
            conn.snd_next = seq_add(conn.snd_next, len(banner))
            conn.rcv_next = seq_add(conn.rcv_next, len(seg.payload))
            if b is Behavior.SHUNNER and s.trigger == "on_data":
                self.blocked.add(seg.src_ip)
            return out
        if seg.payload:
            return self._on_data(key, conn, seg)
        return out

    def _on_data(self, key, conn: Conn, seg: TcpSegment) -> Out:
        s = self.script
        b = s.behavior
        if not seg.payload:
            return []
        if b in (Behavior.ZERO_WINDOW, Behavior.MID_HANDSHAKE_DROPPER, Behavior.NON_ACKER):
            return []
        if b is Behavior.DYNAMIC_BLOCKER:
            self.blocked.add(seg.src_ip)
            self.conns.pop(key, None)
            return []
        if b is Behavior.WILDCARD_ACKER and not self._port_acks(seg.dst_port):
            return []

        end = seq_add(seg.seq, len(seg.payload))
        if conn.responded:
            # retransmitted data: re-ack and resend whatever we answered
            return [(0.0, self._reply(seg, Flags.ACK | Flags.PSH if conn.reply else Flags.ACK,
                                      seq=seq_add(conn.snd_next, -len(conn.reply)), ack=end, payload=conn.reply))]
        conn.responded = True
        conn.rcv_next = end

        if b is Behavior.WILDCARD_ACKER:
            out = [(0.0, self._reply(seg, Flags.ACK, seq=conn.snd_next, ack=end))]
            if not s.silent_after_ack:
                out.append((0.0, self._reply(seg, Flags.RST, seq=conn.snd_next, window=0,
                                             payload=b"BIG-IP System: connection reset")))
                self.conns.pop(key, None)
            return out

        probe, variant = responses.classify_probe(seg.payload, self.registry)
        proto = self._service_protocol()
        reply = b""
        if b is Behavior.OPTION_SENSITIVE:
            if probe == proto and self.registry.payload(proto, s.accept_variant) == seg.payload:
                reply = responses.NATIVE.get(proto, b"")
        elif proto is not None:
            reply = responses.reply_for(proto, probe)
        conn.reply = reply
        out = [(0.0, self._reply(seg, Flags.ACK | Flags.PSH if reply else Flags.ACK,
                                 seq=conn.snd_next, ack=end, payload=reply))]
        conn.snd_next = seq_add(conn.snd_next, len(reply))
        if b is Behavior.SHUNNER and s.trigger == "on_data":
            self.blocked.add(seg.src_ip)
        return out
