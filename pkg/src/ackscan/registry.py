"""Handshake registry: what each protocol probe sends and how responses are fingerprinted.

Every matcher returns the byte offset of the match or ``None``; they are
total over arbitrary input. Signatures are deliberately conservative: an
ASCII keyword is matched case-insensitively, a binary pattern exactly.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

Matcher = Callable[[bytes], Optional[int]]


class RegistryError(KeyError):
    pass


class MatchedBy(enum.Enum):
    EXPECTED_FIRST = "ExpectedFirst"
    REGISTRY_SWEEP = "RegistrySweep"


@dataclass(frozen=True)
class FingerprintResult:
    matched_protocol: Optional[str] = None
    matched_by: Optional[MatchedBy] = None
    matched_offset: Optional[int] = None

    def __bool__(self) -> bool:
        return self.matched_protocol is not None


NO_MATCH = FingerprintResult()


# -- matcher building blocks ----------------------------------------------

def keyword(*words: str) -> Matcher:
    """Case-insensitive substring match on any of ``words``."""
    needles = [w.lower().encode() for w in words]

    def match(data: bytes) -> Optional[int]:
        low = data.lower()
        hits = [i for i in (low.find(n) for n in needles) if i >= 0]
        return min(hits) if hits else None

    match.patterns = [("kw", w) for w in words]  # type: ignore[attr-defined]
    return match


def prefix(*heads: bytes) -> Matcher:
    """Exact binary prefix match at offset 0."""

    def match(data: bytes) -> Optional[int]:
        return 0 if any(data.startswith(h) for h in heads) else None

    match.patterns = [("prefix", h.hex()) for h in heads]  # type: ignore[attr-defined]
    return match


def contains(*needles: bytes) -> Matcher:
    """Exact binary substring match anywhere."""

    def match(data: bytes) -> Optional[int]:
        hits = [i for i in (data.find(n) for n in needles) if i >= 0]
        return min(hits) if hits else None

    match.patterns = [("bytes", n.hex()) for n in needles]  # type: ignore[attr-defined]
    return match


def any_of(*matchers: Matcher) -> Matcher:
    def match(data: bytes) -> Optional[int]:
        hits = [m(data) for m in matchers]
        hits = [h for h in hits if h is not None]
        return min(hits) if hits else None

    return match


def never(data: bytes) -> Optional[int]:
    return None


# -- probe payloads --------------------------------------------------------

AGNOSTIC_PROBE = b"\n\n"

HTTP_GET = b"GET / HTTP/1.1\r\nHost: localhost\r\nUser-Agent: Mozilla/5.0\r\nAccept: */*\r\n\r\n"
HTTP_OPTIONS = b"OPTIONS / HTTP/1.1\r\nHost: localhost\r\nUser-Agent: Mozilla/5.0\r\nAccept: */*\r\n\r\n"

PPTP_GOOD_COOKIE = 0x1A2B3C4D
PPTP_BAD_COOKIE = 0x11111111

SECURE_SUITES = (0x1301, 0x1302, 0x1303, 0xC02B, 0xC02F, 0xC02C, 0xC030, 0xCCA9, 0xCCA8)
EXPORT_SUITES = (0x0003,)  # TLS_RSA_EXPORT_WITH_RC4_40_MD5

DNS_QUERY_ID = 0x5A5A
MODBUS_TID = 0x1337


def tls_client_hello(suites: Sequence[int] = SECURE_SUITES) -> bytes:
    suites_raw = b"".join(struct.pack("!H", s) for s in suites)
    groups = struct.pack("!HHH", 4, 0x001D, 0x0017)
    sigalgs = struct.pack("!HHHH", 6, 0x0403, 0x0804, 0x0401)
    exts = (
        struct.pack("!HH", 0x000A, len(groups)) + groups
        + struct.pack("!HHBB", 0x000B, 2, 1, 0)
        + struct.pack("!HH", 0x000D, len(sigalgs)) + sigalgs
    )
    body = (
        b"\x03\x03" + bytes(range(32)) + b"\x00"
        + struct.pack("!H", len(suites_raw)) + suites_raw
        + b"\x01\x00"
        + struct.pack("!H", len(exts)) + exts
    )
    handshake = b"\x01" + len(body).to_bytes(3, "big") + body
    return b"\x16\x03\x01" + struct.pack("!H", len(handshake)) + handshake


def pptp_sccrq(cookie: int = PPTP_GOOD_COOKIE) -> bytes:
    """Start-Control-Connection-Request (RFC 2637), 156 bytes."""
    return struct.pack(
        "!HHIHHHHIIHH64s64s",
        156, 1, cookie, 1, 0, 0x0100, 0, 1, 1, 0, 0, b"", b"",
    )


def dns_query() -> bytes:
    msg = struct.pack("!HHHHHH", DNS_QUERY_ID, 0x0100, 1, 0, 0, 0) + b"\x00" + struct.pack("!HH", 2, 1)
    return struct.pack("!H", len(msg)) + msg


def _mongo_ismaster() -> bytes:
    doc = b"\x10isMaster\x00" + struct.pack("<i", 1) + b"\x00"
    doc = struct.pack("<i", len(doc) + 4) + doc
    body = struct.pack("<i", 0) + b"admin.$cmd\x00" + struct.pack("<ii", 0, -1) + doc
    return struct.pack("<iiii", 16 + len(body), 1, 0, 2004) + body


def _postgres_startup() -> bytes:
    params = b"user\x00postgres\x00database\x00postgres\x00\x00"
    return struct.pack("!ii", 8 + len(params), 196608) + params


def _mqtt_connect() -> bytes:
    client = b"probe"
    var = b"\x00\x04MQTT\x04\x02\x00\x3c" + struct.pack("!H", len(client)) + client
    return bytes([0x10, len(var)]) + var


def _mssql_prelogin() -> bytes:
    # single VERSION option, terminator, then the 6-byte version value
    options = struct.pack("!BHH", 0, 6, 6) + b"\xff" + bytes(6)
    return struct.pack("!BBHHBB", 0x12, 0x01, 8 + len(options), 0, 0, 0) + options


def _oracle_connect() -> bytes:
    data = b"(DESCRIPTION=(CONNECT_DATA=(SERVICE_NAME=ORCL)))"
    # version, compat version, options, SDU, TDU, protocol chars, line turnaround,
    # "1" in hardware byte order, connect-data length and offset, max receivable, flags
    fixed = struct.pack("!HHHHHHHHHHIBB", 0x013A, 0x012C, 0, 0x2000, 0xFFFF, 0x7F08, 0, 1,
                        len(data), 58, 0, 0x41, 0x41)
    fixed += bytes(58 - 8 - len(fixed))
    pkt = fixed + data
    return struct.pack("!HHBBH", 8 + len(pkt), 0, 1, 0, 0) + pkt


def _smb_negotiate() -> bytes:
    dialects = b"\x02NT LM 0.12\x00\x02SMB 2.002\x00"
    smb = (b"\xffSMB\x72" + bytes(4) + b"\x18" + struct.pack("<H", 0xC853)
           + bytes(12) + struct.pack("<HHHH", 0, 0xFEFF, 0, 0)
           + b"\x00" + struct.pack("<H", len(dialects)) + dialects)
    return struct.pack("!I", len(smb)) + smb


S7_COTP_CR = bytes.fromhex("0300001611e00000000100c1020100c2020102c0010a")
RDP_CR = bytes.fromhex("030000130ee000000000000100080003000000")
MODBUS_READ_ID = struct.pack("!HHHBBBBB", MODBUS_TID, 0, 5, 0, 0x2B, 0x0E, 0x01, 0x00)
DNP3_LINK_STATUS = bytes.fromhex("056405c900000000364c")
BGP_OPEN = b"\xff" * 16 + struct.pack("!HBBHHIB", 29, 1, 4, 64512, 180, 0x0A000001, 0)
IPMI_PING = bytes.fromhex("0600ff06000011be80000000")
SIP_OPTIONS = (b"OPTIONS sip:nm SIP/2.0\r\nVia: SIP/2.0/TCP nm;branch=z9hG4bK\r\nFrom: <sip:nm@nm>;tag=1\r\n"
               b"To: <sip:nm2@nm2>\r\nCall-ID: 50000\r\nCSeq: 42 OPTIONS\r\nMax-Forwards: 70\r\n"
               b"Content-Length: 0\r\n\r\n")
REDIS_PING = b"*1\r\n$4\r\nPING\r\n"
MEMCACHED_STATS = b"stats\r\n"
AMQP_HEADER = b"AMQP\x00\x00\x09\x01"
IPP_REQUEST = (b"POST /ipp HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/ipp\r\n"
               b"Content-Length: 9\r\n\r\n\x02\x00\x00\x0b\x00\x00\x00\x01\x03")
K8S_GET = b"GET /version HTTP/1.1\r\nHost: localhost\r\nAccept: application/json\r\n\r\n"


# -- binary matchers ---------------------------------------------------------

def _tls(data: bytes) -> Optional[int]:
    if len(data) >= 5 and data[0] in (0x15, 0x16) and data[1] == 0x03 and data[2] <= 0x04:
        return 0
    return None


def _mysql(data: bytes) -> Optional[int]:
    if len(data) < 5:
        return None
    length = int.from_bytes(data[:3], "little")
    if data[3] == 0 and data[4] == 0x0A and 0 < length <= len(data) - 4:
        return 4
    if data[4] == 0xFF and b"mysql" in data.lower():
        return 4
    return None


def _dns(data: bytes) -> Optional[int]:
    if len(data) >= 14 and struct.unpack_from("!H", data, 2)[0] == DNS_QUERY_ID and data[4] & 0x80:
        return 2
    return None


def _pptp(data: bytes) -> Optional[int]:
    if len(data) >= 10 and data[2:4] == b"\x00\x01" and data[4:8] == struct.pack("!I", PPTP_GOOD_COOKIE) \
            and data[8:10] == b"\x00\x02":
        return 4
    return None


def _mongodb(data: bytes) -> Optional[int]:
    if len(data) < 16:
        return None
    length, _, _, opcode = struct.unpack_from("<iiii", data)
    return 12 if length == len(data) and opcode in (1, 2013) else None


def _postgres(data: bytes) -> Optional[int]:
    if len(data) < 9 or data[0:1] not in (b"R", b"E"):
        return None
    (length,) = struct.unpack_from("!i", data, 1)
    if data[0:1] == b"R" and length >= 8:
        return 0
    if data[0:1] == b"E" and (b"SFATAL" in data or b"SERROR" in data):
        return 0
    return None


def _mqtt(data: bytes) -> Optional[int]:
    return 0 if len(data) == 4 and data[0] == 0x20 and data[1] == 0x02 else None


def _amqp(data: bytes) -> Optional[int]:
    if data.startswith(b"AMQP"):
        return 0
    if len(data) >= 11 and data[0] == 1 and data[7:11] == b"\x00\x0a\x00\x0a":
        return 7
    return None


def _mssql(data: bytes) -> Optional[int]:
    if len(data) >= 8 and data[0] == 0x04 and data[1] == 0x01 and struct.unpack_from("!H", data, 2)[0] == len(data):
        return 0
    return None


def _oracle(data: bytes) -> Optional[int]:
    if len(data) >= 8 and struct.unpack_from("!H", data)[0] == len(data) and data[4] in (2, 4, 5, 11) and data[5] == 0:
        return 4
    return None


def _smb(data: bytes) -> Optional[int]:
    if len(data) >= 8 and data[4:8] in (b"\xffSMB", b"\xfeSMB"):
        return 4
    return None


def _tpkt_cc(data: bytes) -> bool:
    return len(data) >= 12 and data[0] == 0x03 and data[1] == 0x00 and data[5] == 0xD0


def _rdp(data: bytes) -> Optional[int]:
    return 5 if _tpkt_cc(data) and data[11] in (0x02, 0x03) else None


def _s7(data: bytes) -> Optional[int]:
    return 5 if _tpkt_cc(data) and b"\xc1\x02" in data[11:] else None


def _modbus(data: bytes) -> Optional[int]:
    if len(data) >= 8 and struct.unpack_from("!HH", data) == (MODBUS_TID, 0) and data[7] in (0x2B, 0xAB):
        return 7
    return None


def _telnet_iac(data: bytes) -> Optional[int]:
    return 0 if len(data) >= 2 and data[0] == 0xFF and 0xFB <= data[1] <= 0xFE else None


# -- registry ----------------------------------------------------------------

@dataclass
class HandshakeSpec:
    protocol_name: str
    probe_payload: bytes
    matcher: Matcher = never
    server_first: bool = False
    payload_variants: Dict[str, bytes] = field(default_factory=dict)
    ports: Tuple[int, ...] = ()

    def payload(self, variant: Optional[str] = None) -> bytes:
        if variant is None or variant == "default":
            return self.probe_payload
        try:
            return self.payload_variants[variant]
        except KeyError:
            raise RegistryError(f"unknown variant {variant!r} for {self.protocol_name}") from None

    def matches(self, data: bytes) -> Optional[int]:
        try:
            return self.matcher(data)
        except Exception:  # matchers must be total; a buggy one simply does not fire
            return None


class Registry:
    """Ordered, name-unique collection of handshakes."""

    def __init__(self, specs: Iterable[HandshakeSpec] = ()):
        self._specs: Dict[str, HandshakeSpec] = {}
        for spec in specs:
            self.register(spec)

    def register(self, spec: HandshakeSpec) -> None:
        if spec.protocol_name in self._specs:
            raise RegistryError(f"duplicate handshake {spec.protocol_name!r}")
        self._specs[spec.protocol_name] = spec

    def replace(self, spec: HandshakeSpec) -> None:
        """Override an existing entry in place, or append a new one."""
        self._specs[spec.protocol_name] = spec

    def __contains__(self, name: object) -> bool:
        return name in self._specs

    def __iter__(self) -> Iterator[HandshakeSpec]:
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)

    def names(self) -> List[str]:
        return list(self._specs)

    def get(self, name: str) -> HandshakeSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise RegistryError(f"unknown protocol {name!r}") from None

    def payload(self, protocol: str, variant: Optional[str] = None) -> bytes:
        return self.get(protocol).payload(variant)

    def match(self, data: bytes, expected: Optional[str] = None) -> FingerprintResult:
        """Try the expected protocol first, then every other entry in order."""
        if not data:
            return NO_MATCH
        if expected is not None:
            spec = self.get(expected)
            offset = spec.matches(data)
            if offset is not None:
                return FingerprintResult(expected, MatchedBy.EXPECTED_FIRST, offset)
        for spec in self._specs.values():
            if spec.protocol_name == expected:
                continue
            offset = spec.matches(data)
            if offset is not None:
                return FingerprintResult(spec.protocol_name, MatchedBy.REGISTRY_SWEEP, offset)
        return NO_MATCH

    def expected_for_port(self, port: int) -> Optional[str]:
        for spec in self._specs.values():
            if port in spec.ports:
                return spec.protocol_name
        return None

    # -- signature files --------------------------------------------------
    @classmethod
    def load(cls, path: Union[str, Path], base: Optional["Registry"] = None) -> "Registry":
        """Read a signature file; entries override same-named ones in ``base``."""
        reg = cls(list(base)) if base is not None else cls()
        for spec in parse_signatures(Path(path).read_text()):
            reg.replace(spec)
        return reg


def _pattern_matcher(tokens: Sequence[str]) -> Matcher:
    parts: List[Matcher] = []
    patterns: List[Tuple[str, str]] = []
    for tok in tokens:
        kind, _, value = tok.partition(":")
        patterns.append((kind, value))
        if kind == "kw":
            parts.append(keyword(value))
        elif kind == "prefix":
            parts.append(prefix(bytes.fromhex(value)))
        elif kind == "bytes":
            parts.append(contains(bytes.fromhex(value)))
        else:
            raise ValueError(f"unknown pattern kind {kind!r}")
    if not parts:
        return never
    matcher = any_of(*parts)
    matcher.patterns = patterns  # lets dump_signatures write it back
    return matcher


def parse_signatures(text: str) -> List[HandshakeSpec]:
    """Parse the plain-text signature format.

    One protocol per line::

        name  server_first(0|1)  probe_hex|-  [kw:WORD] [prefix:HEX] [bytes:HEX]
              [variant:NAME=HEX] [port:N]

    Blank lines and ``#`` comments are ignored.
    """
    specs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 3 or fields[1] not in ("0", "1"):
            raise ValueError(f"line {lineno}: expected 'name server_first probe_hex patterns...'")
        name, server_first, probe_hex, rest = fields[0], fields[1] == "1", fields[2], fields[3:]
        variants: Dict[str, bytes] = {}
        ports: List[int] = []
        patterns = []
        for tok in rest:
            if tok.startswith("variant:"):
                vname, _, vhex = tok[len("variant:"):].partition("=")
                variants[vname] = bytes.fromhex(vhex)
            elif tok.startswith("port:"):
                ports.append(int(tok[len("port:"):]))
            else:
                patterns.append(tok)
        try:
            matcher = _pattern_matcher(patterns)
            probe = b"" if probe_hex == "-" else bytes.fromhex(probe_hex)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        specs.append(HandshakeSpec(name, probe, matcher, server_first, variants, tuple(ports)))
    return specs


def dump_signatures(registry: Registry) -> str:
    """Render entries whose matchers are pattern-based back into the file format."""
    lines = []
    for spec in registry:
        pats = getattr(spec.matcher, "patterns", None)
        if pats is None and spec.matcher is not never:
            continue
        toks = [f"{k}:{v}" for k, v in (pats or [])]
        toks += [f"variant:{k}={v.hex()}" for k, v in spec.payload_variants.items()]
        toks += [f"port:{p}" for p in spec.ports]
        probe = spec.probe_payload.hex() or "-"
        lines.append(" ".join([spec.protocol_name, "1" if spec.server_first else "0", probe, *toks]))
    return "\n".join(lines) + "\n"


# Probe-only pseudo handshakes: "wait" sends nothing, "agnostic" sends two newlines.
WAIT = "wait"
AGNOSTIC = "agnostic"

SERVER_FIRST = ("pop3", "imap", "mysql", "ftp", "vnc", "ssh", "telnet", "smtp")


def seed_specs() -> List[HandshakeSpec]:
    S = HandshakeSpec
    return [
        S(WAIT, b"", never),
        S(AGNOSTIC, AGNOSTIC_PROBE, never),
        S("http", HTTP_GET, keyword("HTTP/"), payload_variants={"get": HTTP_GET, "options": HTTP_OPTIONS},
          ports=(80, 7547, 8080, 4567)),
        S("tls", tls_client_hello(), _tls,
          payload_variants={"secure": tls_client_hello(SECURE_SUITES), "insecure": tls_client_hello(EXPORT_SUITES)},
          ports=(443, 8443, 993, 995, 465, 8883)),
        S("ssh", b"", keyword("ssh"), server_first=True, ports=(22,)),
        S("ftp", b"", keyword("ftp"), server_first=True, ports=(21,)),
        S("smtp", b"", keyword("smtp"), server_first=True, ports=(25, 587)),
        S("pop3", b"", any_of(prefix(b"+OK"), keyword("pop3")), server_first=True, ports=(110,)),
        S("imap", b"", any_of(prefix(b"* OK", b"* PREAUTH"), keyword("imap")), server_first=True, ports=(143,)),
        S("vnc", b"", keyword("RFB"), server_first=True, ports=(5900,)),
        S("mysql", b"", _mysql, server_first=True, ports=(3306,)),
        S("dns", dns_query(), _dns, ports=(53,)),
        S("pptp", pptp_sccrq(), _pptp,
          payload_variants={"good_cookie": pptp_sccrq(PPTP_GOOD_COOKIE), "bad_cookie": pptp_sccrq(PPTP_BAD_COOKIE)},
          ports=(1723,)),
        S("redis", REDIS_PING, prefix(b"+PONG", b"-ERR", b"-NOAUTH", b"-DENIED"), ports=(6379,)),
        S("mongodb", _mongo_ismaster(), _mongodb, ports=(27017,)),
        S("memcached", MEMCACHED_STATS, prefix(b"STAT ", b"VERSION ", b"ERROR\r\n"), ports=(11211,)),
        S("amqp", AMQP_HEADER, _amqp, ports=(5672,)),
        S("mqtt", _mqtt_connect(), _mqtt, ports=(1883,)),
        S("postgres", _postgres_startup(), _postgres, ports=(5432,)),
        S("mssql", _mssql_prelogin(), _mssql, ports=(1433,)),
        S("oracle", _oracle_connect(), _oracle, ports=(1521,)),
        S("smb", _smb_negotiate(), _smb, ports=(445,)),
        S("rdp", RDP_CR, _rdp, ports=(3389,)),
        S("siemens", S7_COTP_CR, _s7, ports=(102,)),
        S("modbus", MODBUS_READ_ID, _modbus, ports=(502,)),
        S("dnp3", DNP3_LINK_STATUS, prefix(b"\x05\x64"), ports=(20000,)),
        S("bgp", BGP_OPEN, prefix(b"\xff" * 16), ports=(179,)),
        S("sip", SIP_OPTIONS, prefix(b"SIP/2.0"), ports=(5060,)),
        S("ipmi", IPMI_PING, prefix(b"\x06\x00\xff"), ports=(623,)),
        S("ipp", IPP_REQUEST, keyword("application/ipp"), ports=(631,)),
        S("kubernetes", K8S_GET, keyword('"gitVersion"'), ports=(6443,)),
        S("telnet", b"", any_of(_telnet_iac, keyword("login", "user")), server_first=True, ports=(23,)),
    ]


def default_registry() -> Registry:
    return Registry(seed_specs())


def parse_plan_entry(entry: str) -> Tuple[str, Optional[str]]:
    """``"http:options"`` -> ("http", "options")."""
    name, _, variant = entry.partition(":")
    return name, (variant or None)


def validate_plan(registry: Registry, plan: Sequence[str]) -> None:
    if not plan:
        raise ValueError("handshake plan is empty")
    for entry in plan:
        name, variant = parse_plan_entry(entry)
        registry.payload(name, variant)


EXPECTED_BY_PORT: Mapping[int, str] = {
    port: spec.protocol_name for spec in seed_specs() for port in spec.ports
}
