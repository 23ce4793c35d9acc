import struct

import pytest
from hypothesis import given, strategies as st

from ackscan.packet import (
    FlowTable, Flags, PacketError, Phase, TcpSegment, adopt, craft, frame, parse, segment, seq_add, seq_geq,
    unframe,
)

ips = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
ports = st.integers(1, 65535)
u32 = st.integers(0, 2**32 - 1)
flag_sets = st.integers(0, 0x1F).map(Flags)


@st.composite
def segments(draw):
    flags = draw(flag_sets)
    return segment(draw(ips), draw(ips), draw(ports), draw(ports), seq=draw(u32),
                   ack=draw(u32), flags=flags, window=draw(st.integers(0, 65535)),
                   ttl=draw(st.integers(0, 255)), payload=draw(st.binary(max_size=64)))


def ones_complement_ok(data: bytes) -> bool:
    # independent check: the folded 16-bit sum over a checksummed block is 0xFFFF
    if len(data) % 2:
        data += b"\0"
    total = sum(int.from_bytes(data[i:i + 2], "big") for i in range(0, len(data), 2))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total == 0xFFFF


@given(segments())
def test_round_trip(seg):
    assert parse(craft(seg), strict=True) == seg


@given(segments())
def test_checksums_are_well_formed(seg):
    wire = craft(seg)
    assert ones_complement_ok(wire[:20])
    tcp = wire[20:]
    pseudo = wire[12:20] + struct.pack("!BBH", 0, 6, len(tcp))
    assert ones_complement_ok(pseudo + tcp)


def test_examples():
    syn = parse(craft(segment("10.0.0.1", "10.0.0.2", 4000, 80, flags=Flags.SYN)))
    assert syn.flags == Flags.SYN and syn.payload == b""
    data = parse(craft(segment("10.0.0.1", "10.0.0.2", 4000, 80, flags=Flags.ACK | Flags.PSH, payload=b"\n\n")))
    assert len(data.payload) == 2
    zw = parse(craft(segment("10.0.0.2", "10.0.0.1", 80, 4000, flags=Flags.SYN | Flags.ACK, ack=7, window=0)))
    assert zw.window == 0


def test_syn_rst_parsed_faithfully():
    seg = parse(craft(segment("1.1.1.1", "2.2.2.2", 1, 2, flags=Flags.SYN | Flags.RST)))
    assert seg.flags == Flags.SYN | Flags.RST


def test_ttl_preserved_for_each_segment():
    a = segment("1.1.1.1", "2.2.2.2", 1, 2, flags=Flags.SYN | Flags.ACK, ttl=64)
    b = segment("1.1.1.1", "2.2.2.2", 1, 2, flags=Flags.SYN | Flags.ACK, ttl=128)
    assert (parse(craft(a)).ttl, parse(craft(b)).ttl) == (64, 128)


def test_ack_zeroed_without_ack_flag():
    assert segment("1.1.1.1", "2.2.2.2", 1, 2, ack=99, flags=Flags.SYN).ack == 0
    with pytest.raises(PacketError):
        craft(TcpSegment("1.1.1.1", "2.2.2.2", 1, 2, ack=99, flags=Flags.SYN))


def test_payload_too_large():
    with pytest.raises(PacketError, match="payload too large"):
        craft(segment("1.1.1.1", "2.2.2.2", 1, 2, payload=b"x" * 1461))
    craft(segment("1.1.1.1", "2.2.2.2", 1, 2, payload=b"x" * 1460))


def test_truncated_header():
    wire = craft(segment("1.1.1.1", "2.2.2.2", 1, 2, flags=Flags.SYN))
    for n in (0, 10, 39):
        with pytest.raises(PacketError, match="malformed segment"):
            parse(wire[:n])


def test_tcp_options_skipped():
    seg = segment("1.1.1.1", "2.2.2.2", 1, 2, flags=Flags.SYN | Flags.ACK, ack=5, payload=b"hi")
    wire = bytearray(craft(seg))
    mss = bytes([2, 4, 0x05, 0xB4])
    wire[32] = (6 << 4)  # data offset 24 bytes
    wire[40:40] = mss
    wire[2:4] = struct.pack("!H", len(wire))
    assert parse(bytes(wire)) == seg


def test_strict_rejects_corruption():
    wire = bytearray(craft(segment("1.1.1.1", "2.2.2.2", 1, 2, flags=Flags.ACK, ack=3, payload=b"abc")))
    wire[-1] ^= 0xFF
    parse(bytes(wire))
    with pytest.raises(PacketError):
        parse(bytes(wire), strict=True)


def test_adopt_examples():
    synack = segment("10.0.0.2", "10.0.0.1", 80, 4000, seq=1000, ack=5001, flags=Flags.SYN | Flags.ACK,
                     window=0, ttl=50)
    flow = adopt(synack)
    assert (flow.our_next_seq, flow.their_next_seq) == (5001, 1001)
    assert flow.phase is Phase.SYNACK_SEEN
    assert (flow.observed_window, flow.synack_ttl) == (0, 50)
    assert flow.four_tuple == ("10.0.0.1", 4000, "10.0.0.2", 80)
    wrap = adopt(segment("10.0.0.2", "10.0.0.1", 80, 4000, seq=2**32 - 1, ack=1, flags=Flags.SYN | Flags.ACK))
    assert wrap.their_next_seq == 0


def test_adopt_requires_synack():
    for flags in (Flags.SYN, Flags.ACK, Flags.RST | Flags.ACK):
        with pytest.raises(PacketError, match="not a syn-ack"):
            adopt(segment("1.1.1.1", "2.2.2.2", 1, 2, flags=flags))


@given(u32, u32)
def test_adopt_sequence_arithmetic(seq, ack):
    flow = adopt(segment("1.1.1.1", "2.2.2.2", 1, 2, seq=seq, ack=ack, flags=Flags.SYN | Flags.ACK))
    assert flow.our_next_seq == ack
    assert flow.their_next_seq == (seq + 1) % 2**32


@given(u32, st.integers(0, 2**31 - 1))
def test_seq_geq_across_wrap(a, n):
    assert seq_geq(seq_add(a, n), a)
    if n:
        assert not seq_geq(a, seq_add(a, n))


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), max_size=60))
def test_flow_table_no_leakage(deliveries):
    table = FlowTable()
    got = {}
    keys = [("192.0.2.1", 1000 + i, "10.0.0.1", 80) for i in range(3)]
    for key in keys:
        table.bind(key, lambda seg, k=key: got.setdefault(k, []).append(seg))
    expected = {}
    for i, n in deliveries:
        port = 1000 + i  # i == 3 has no flow
        seg = segment("10.0.0.1", "192.0.2.1", 80, port, seq=n)
        table.dispatch(seg)
        if i < 3:
            expected.setdefault(keys[i], []).append(seg)
    assert got == expected
    assert table.orphans == sum(1 for i, _ in deliveries if i == 3)


def test_flow_table_rejects_double_bind_and_keeps_counters():
    table = FlowTable()
    key = ("192.0.2.1", 1000, "10.0.0.1", 80)
    table.bind(key, lambda s: None)
    with pytest.raises(KeyError):
        table.bind(key, lambda s: None)
    table.dispatch(segment("10.0.0.1", "192.0.2.1", 80, 1000))
    table.unbind(key)
    table.dispatch(segment("10.0.0.1", "192.0.2.1", 80, 1000))
    assert table.received(key) == 1 and table.orphans == 1


@given(st.lists(st.binary(min_size=0, max_size=80), max_size=5))
def test_frame_stream(parts):
    buf = b"".join(frame(p) for p in parts)
    out = []
    while buf:
        wire, buf = unframe(buf)
        out.append(wire)
    assert out == parts


def test_unframe_truncated():
    with pytest.raises(PacketError):
        unframe(frame(b"abcd")[:-1])
