"""Canned first-response bytes for simulated services.

``BANNERS`` are what server-first protocols send as soon as the handshake
completes. ``REPLIES[protocol][probe]`` is what a client-first service
answers to a given probe; a missing entry means the service acknowledges
the data and stays quiet. The cross-protocol entries are a small caricature
of real deployments: HTTP answers almost anything, TLS alerts on plaintext,
binary protocols only answer their own handshake.
"""

import struct

from .. import registry as reg


def _mysql_greeting() -> bytes:
    body = b"\x0a" + b"5.7.33-log\x00" + struct.pack("<I", 7) + b"abcdefgh\x00" + b"\xff\xf7\x08\x02\x00"
    return len(body).to_bytes(3, "little") + b"\x00" + body


BANNERS = {
    "ssh": b"SSH-2.0-OpenSSH_7.4\r\n",
    "ftp": b"220 ProFTPD 1.3.5 Server (FTP) ready.\r\n",
    "smtp": b"220 mail.example.com ESMTP Postfix\r\n",
    "pop3": b"+OK POP3 server ready\r\n",
    "imap": b"* OK [CAPABILITY IMAP4rev1 LITERAL+ SASL-IR] Dovecot ready.\r\n",
    "vnc": b"RFB 003.008\n",
    "mysql": _mysql_greeting(),
    "telnet": b"\r\nlogin: ",
}

HTTP_200 = b"HTTP/1.1 200 OK\r\nServer: nginx\r\nContent-Length: 0\r\n\r\n"
HTTP_400 = b"HTTP/1.1 400 Bad Request\r\nServer: nginx\r\nContent-Length: 0\r\n\r\n"
HTTP_405 = b"HTTP/1.1 405 Method Not Allowed\r\nServer: nginx\r\nContent-Length: 0\r\n\r\n"
TLS_SERVER_HELLO = b"\x16\x03\x03\x00\x2a\x02\x00\x00\x26\x03\x03" + bytes(32) + b"\x00\xc0\x2f\x00"
TLS_ALERT = b"\x15\x03\x01\x00\x02\x02\x28"


def _pptp_sccrp() -> bytes:
    return struct.pack("!HHIHHHBBIIHH64s64s", 156, 1, reg.PPTP_GOOD_COOKIE, 2, 0, 0x0100, 1, 0,
                       1, 1, 1, 0, b"pptp", b"sim")


def _dns_reply() -> bytes:
    msg = struct.pack("!HHHHHH", reg.DNS_QUERY_ID, 0x8180, 1, 0, 0, 0) + b"\x00" + struct.pack("!HH", 2, 1)
    return struct.pack("!H", len(msg)) + msg


def _mongo_reply() -> bytes:
    doc = b"\x01ok\x00" + struct.pack("<d", 1.0) + b"\x00"
    doc = struct.pack("<i", len(doc) + 4) + doc
    body = struct.pack("<iqii", 8, 0, 0, 1) + doc
    return struct.pack("<iiii", 16 + len(body), 99, 1, 1) + body


def _mssql_reply() -> bytes:
    options = struct.pack("!BHH", 0, 6, 6) + b"\xff" + bytes.fromhex("0e0007d00000")
    return struct.pack("!BBHHBB", 0x04, 0x01, 8 + len(options), 0, 1, 0) + options


def _oracle_refuse() -> bytes:
    data = b"(DESCRIPTION=(ERR=12514))"
    body = struct.pack("!BBH", 1, 1, len(data)) + data
    return struct.pack("!HHBBH", 8 + len(body), 0, 4, 0, 0) + body


def _smb_reply() -> bytes:
    smb = b"\xfeSMB" + struct.pack("<HH", 64, 0) + bytes(56)
    return struct.pack("!I", len(smb)) + smb


def _amqp_start() -> bytes:
    args = b"\x00\x09" + struct.pack("!I", 0) + struct.pack("!I", 14) + b"PLAIN AMQPLAIN" + struct.pack("!I", 5) + b"en_US"
    payload = b"\x00\x0a\x00\x0a" + args
    return b"\x01\x00\x00" + struct.pack("!I", len(payload)) + payload + b"\xce"


REDIS_ERR = b"-ERR unknown command 'GET', with args beginning with: '/'\r\n"
MEMCACHED_ERROR = b"ERROR\r\n"

NATIVE = {
    "http": HTTP_200,
    "tls": TLS_SERVER_HELLO,
    "dns": _dns_reply(),
    "pptp": _pptp_sccrp(),
    "redis": b"+PONG\r\n",
    "mongodb": _mongo_reply(),
    "memcached": b"STAT pid 1\r\nSTAT uptime 100\r\nEND\r\n",
    "amqp": _amqp_start(),
    "mqtt": b"\x20\x02\x00\x00",
    "postgres": b"R" + struct.pack("!ii", 8, 5) + b"salt",
    "mssql": _mssql_reply(),
    "oracle": _oracle_refuse(),
    "smb": _smb_reply(),
    "rdp": bytes.fromhex("030000130ed000001234000200080001000000"),
    "siemens": bytes.fromhex("0300001611d00001000100c0010ac1020100c2020102"),
    "modbus": struct.pack("!HHHBB", reg.MODBUS_TID, 0, 3, 0, 0xAB) + b"\x01",
    "dnp3": bytes.fromhex("0564050b01000000e2a1"),
    "bgp": b"\xff" * 16 + struct.pack("!HB", 19, 4),
    "sip": b"SIP/2.0 200 OK\r\nCSeq: 42 OPTIONS\r\nContent-Length: 0\r\n\r\n",
    "ipmi": bytes.fromhex("0600ff0600000011be000000"),
    "ipp": b"HTTP/1.1 200 OK\r\nContent-Type: application/ipp\r\nServer: CUPS/2.2\r\n\r\n",
    "kubernetes": b'HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n\r\n{"major": "1", "gitVersion": "v1.18.0"}',
}

# Answers to probes other than the protocol's own.
CROSS = {
    "http": {"tls": HTTP_400, "agnostic": HTTP_400, "unknown": HTTP_400, "dns": HTTP_400, "pptp": HTTP_400},
    "tls": {"http": TLS_ALERT, "agnostic": TLS_ALERT, "unknown": TLS_ALERT},
    "redis": {"http": REDIS_ERR, "agnostic": REDIS_ERR},
    "memcached": {"http": MEMCACHED_ERROR, "agnostic": MEMCACHED_ERROR},
    "amqp": {"http": b"AMQP\x00\x00\x09\x01", "tls": b"AMQP\x00\x00\x09\x01", "agnostic": b"AMQP\x00\x00\x09\x01"},
    "ipp": {"http": HTTP_200},
    "kubernetes": {"http": HTTP_405},
}


def classify_probe(data: bytes, registry: "reg.Registry") -> tuple:
    """Figure out which registered probe (and variant) produced ``data``."""
    for spec in registry:
        if spec.probe_payload and data == spec.probe_payload:
            return spec.protocol_name, "default"
        for vname, vbytes in spec.payload_variants.items():
            if data == vbytes:
                return spec.protocol_name, vname
    return "unknown", None


def reply_for(protocol: str, probe: str) -> bytes:
    """Response a service of ``protocol`` sends to ``probe``; b'' for none."""
    if protocol in BANNERS:
        return b""
    if probe == protocol:
        return NATIVE.get(protocol, b"")
    return CROSS.get(protocol, {}).get(probe, b"")
