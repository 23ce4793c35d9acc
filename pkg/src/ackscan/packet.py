"""Raw TCP/IPv4 segment crafting, parsing and minimal per-flow bookkeeping.

Wire image is a bare IPv4 header (no options emitted) followed by a TCP
header. TCP options are never emitted and are skipped on parse.

     0                   1                   2                   3
     0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |          Source Port          |       Destination Port        |
    |                        Sequence Number                        |
    |                    Acknowledgment Number                      |
    |  Data |       |C|E|U|A|P|R|S|F|            Window             |
    |           Checksum            |         Urgent Pointer        |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
"""

from __future__ import annotations

import enum
import ipaddress
import socket
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

SEQ_MOD = 1 << 32

IP_HEADER = struct.Struct("!BBHHHBBH4s4s")
TCP_HEADER = struct.Struct("!HHIIBBHHH")
FRAME_PREFIX = struct.Struct("!H")

DEFAULT_MTU = 1500
MIN_SEGMENT_LEN = IP_HEADER.size + TCP_HEADER.size


class PacketError(ValueError):
    """Raised for segments that cannot be crafted or parsed."""


class Flags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10

    def __str__(self) -> str:
        names = [f.name for f in (Flags.SYN, Flags.ACK, Flags.RST, Flags.FIN, Flags.PSH) if self & f]
        return "|".join(names) if names else "NONE"


FourTuple = Tuple[str, int, str, int]


@dataclass(frozen=True)
class TcpSegment:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    seq: int = 0
    ack: int = 0
    flags: Flags = Flags(0)
    window: int = 65535
    ttl: int = 64
    payload: bytes = b""

    @property
    def is_synack(self) -> bool:
        return (self.flags & (Flags.SYN | Flags.ACK)) == (Flags.SYN | Flags.ACK)

    @property
    def closes(self) -> bool:
        return bool(self.flags & (Flags.RST | Flags.FIN))

    def summary(self) -> str:
        return (
            f"{self.src_ip}:{self.src_port}>{self.dst_ip}:{self.dst_port} "
            f"{self.flags} seq={self.seq} ack={self.ack} win={self.window} "
            f"ttl={self.ttl} len={len(self.payload)}"
        )


def segment(src_ip: str, dst_ip: str, src_port: int, dst_port: int, *,
            seq: int = 0, ack: int = 0, flags: Flags = Flags(0), window: int = 65535,
            ttl: int = 64, payload: bytes = b"") -> TcpSegment:
    """Build a segment, zeroing the ack field when the ACK flag is clear."""
    flags = Flags(flags)
    if not flags & Flags.ACK:
        ack = 0
    return TcpSegment(src_ip, dst_ip, src_port, dst_port, seq % SEQ_MOD, ack % SEQ_MOD,
                      flags, window, ttl, bytes(payload))


def seq_add(a: int, b: int) -> int:
    return (a + b) % SEQ_MOD


def seq_geq(a: int, b: int) -> bool:
    """True if a is at or after b in sequence space (RFC 1982 style)."""
    return (a - b) % SEQ_MOD < (1 << 31)


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _tcp_checksum(src: bytes, dst: bytes, tcp: bytes) -> int:
    pseudo = src + dst + struct.pack("!BBH", 0, socket.IPPROTO_TCP, len(tcp))
    return _checksum(pseudo + tcp)


def _check_fields(seg: TcpSegment) -> None:
    for name in ("src_port", "dst_port"):
        value = getattr(seg, name)
        if not 0 < value <= 0xFFFF:
            raise PacketError(f"{name} out of range: {value}")
    for name in ("seq", "ack"):
        if not 0 <= getattr(seg, name) < SEQ_MOD:
            raise PacketError(f"{name} out of range")
    if not 0 <= seg.window <= 0xFFFF:
        raise PacketError("window out of range")
    if not 0 <= seg.ttl <= 0xFF:
        raise PacketError("ttl out of range")
    if not seg.flags & Flags.ACK and seg.ack != 0:
        raise PacketError("ack must be 0 when ACK flag is clear")


def craft(seg: TcpSegment, *, mtu: int = DEFAULT_MTU) -> bytes:
    """Serialize a segment into an IPv4+TCP wire image with valid checksums."""
    _check_fields(seg)
    if len(seg.payload) > mtu - MIN_SEGMENT_LEN:
        raise PacketError("payload too large")
    try:
        src = ipaddress.IPv4Address(seg.src_ip).packed
        dst = ipaddress.IPv4Address(seg.dst_ip).packed
    except ipaddress.AddressValueError as exc:
        raise PacketError(str(exc)) from exc

    tcp = TCP_HEADER.pack(seg.src_port, seg.dst_port, seg.seq, seg.ack,
                          (TCP_HEADER.size // 4) << 4, int(seg.flags), seg.window, 0, 0)
    tcp += seg.payload
    csum = _tcp_checksum(src, dst, tcp)
    tcp = tcp[:16] + struct.pack("!H", csum) + tcp[18:]

    total_len = IP_HEADER.size + len(tcp)
    ip = IP_HEADER.pack(0x45, 0, total_len, 0, 0x4000, seg.ttl, socket.IPPROTO_TCP, 0, src, dst)
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    return ip + tcp


def parse(data: bytes, *, strict: bool = False) -> TcpSegment:
    """Inverse of craft. Skips IP and TCP options; verifies checksums if strict."""
    if len(data) < MIN_SEGMENT_LEN:
        raise PacketError("malformed segment")
    ver_ihl, _, total_len, _, _, ttl, proto, _, src, dst = IP_HEADER.unpack_from(data)
    ihl = (ver_ihl & 0x0F) * 4
    if ver_ihl >> 4 != 4 or ihl < IP_HEADER.size or proto != socket.IPPROTO_TCP:
        raise PacketError("malformed segment")
    if total_len > len(data) or total_len < ihl + TCP_HEADER.size:
        raise PacketError("malformed segment")
    tcp = data[ihl:total_len]
    sport, dport, seq, ack, offset, flags, window, _, _ = TCP_HEADER.unpack_from(tcp)
    doff = (offset >> 4) * 4
    if doff < TCP_HEADER.size or doff > len(tcp):
        raise PacketError("malformed segment")
    if strict:
        if _checksum(data[:ihl]) != 0:
            raise PacketError("bad ip checksum")
        if _tcp_checksum(src, dst, tcp) != 0:
            raise PacketError("bad tcp checksum")
    mask = int(Flags.FIN | Flags.SYN | Flags.RST | Flags.PSH | Flags.ACK)
    return TcpSegment(
        src_ip=str(ipaddress.IPv4Address(src)),
        dst_ip=str(ipaddress.IPv4Address(dst)),
        src_port=sport,
        dst_port=dport,
        seq=seq,
        ack=ack,
        flags=Flags(flags & mask),
        window=window,
        ttl=ttl,
        payload=bytes(tcp[doff:]),
    )


def frame(wire: bytes) -> bytes:
    """Length-prefix a wire image for the in-process simulator channel."""
    return FRAME_PREFIX.pack(len(wire)) + wire


def unframe(buf: bytes) -> Tuple[bytes, bytes]:
    """Split one frame off the front of buf; returns (wire, rest)."""
    if len(buf) < FRAME_PREFIX.size:
        raise PacketError("malformed segment")
    (n,) = FRAME_PREFIX.unpack_from(buf)
    end = FRAME_PREFIX.size + n
    if len(buf) < end:
        raise PacketError("malformed segment")
    return buf[FRAME_PREFIX.size:end], buf[end:]


class Phase(enum.Enum):
    SYN_SENT = "SynSent"
    SYNACK_SEEN = "SynAckSeen"
    ACK_SENT = "AckSent"
    DATA_SENT = "DataSent"
    CLOSED = "Closed"


@dataclass
class FlowState:
    four_tuple: FourTuple
    our_next_seq: int
    their_next_seq: int = 0
    observed_window: int = 0
    synack_ttl: int = 0
    bytes_sent_unacked: int = 0
    phase: Phase = Phase.SYN_SENT
    packets_sent: int = 0
    packets_received: int = 0

    @property
    def local(self) -> Tuple[str, int]:
        return self.four_tuple[0], self.four_tuple[1]

    @property
    def remote(self) -> Tuple[str, int]:
        return self.four_tuple[2], self.four_tuple[3]

    def note_sent(self, n: int = 1) -> None:
        self.packets_sent += n

    def note_received(self, n: int = 1) -> None:
        self.packets_received += n


def adopt(synack: TcpSegment) -> FlowState:
    """Continue a connection from a SYN-ACK we did not originate ourselves.

    The SYN-ACK's ack field is taken as our ISN + 1, so this works with
    SYN-cookie style stateless senders.
    """
    if not synack.is_synack:
        raise PacketError("not a syn-ack")
    return FlowState(
        four_tuple=(synack.dst_ip, synack.dst_port, synack.src_ip, synack.src_port),
        our_next_seq=synack.ack,
        their_next_seq=seq_add(synack.seq, 1),
        observed_window=synack.window,
        synack_ttl=synack.ttl,
        phase=Phase.SYNACK_SEEN,
        packets_received=1,
    )


def inbound_key(seg: TcpSegment) -> FourTuple:
    """Flow-table key of an inbound segment, oriented from our side."""
    return (seg.dst_ip, seg.dst_port, seg.src_ip, seg.src_port)


Handler = Callable[[TcpSegment], None]


@dataclass
class FlowTable:
    """Receive demultiplexer: exact four-tuple match, nothing else."""

    handlers: Dict[FourTuple, Handler] = field(default_factory=dict)
    counters: Dict[FourTuple, list] = field(default_factory=dict)
    orphans: int = 0

    def bind(self, key: FourTuple, handler: Handler) -> None:
        if key in self.handlers:
            raise KeyError(f"flow already bound: {key}")
        self.handlers[key] = handler
        self.counters.setdefault(key, [0, 0])

    def unbind(self, key: FourTuple) -> None:
        self.handlers.pop(key, None)

    def in_use(self, key: FourTuple) -> bool:
        return key in self.handlers

    def count_sent(self, seg: TcpSegment) -> None:
        key = (seg.src_ip, seg.src_port, seg.dst_ip, seg.dst_port)
        self.counters.setdefault(key, [0, 0])[0] += 1

    def dispatch(self, seg: TcpSegment) -> Optional[FourTuple]:
        key = inbound_key(seg)
        handler = self.handlers.get(key)
        if handler is None:
            self.orphans += 1
            return None
        self.counters[key][1] += 1
        handler(seg)
        return key

    def sent(self, key: FourTuple) -> int:
        return self.counters.get(key, [0, 0])[0]

    def received(self, key: FourTuple) -> int:
        return self.counters.get(key, [0, 0])[1]
