"""Frozen JSON-lines field names. Fields may be added, never renamed or removed.

See docs/schema.md for the field reference.
"""

from __future__ import annotations

import json
from typing import Any, Dict, Mapping, Optional, Tuple

from .deduce import StateVerdict

SCHEMA_VERSION = 1

RECORD_FIELDS = ("ip", "port", "outcome", "refined_state", "behavior", "protocol",
                 "attempts", "pkts_out", "pkts_in", "ms", "seq", "error")
DEDUCE_FIELDS = ("ip", "port", "outcome", "refined_state", "synack_count", "window", "ttl")
CLASSIFY_FIELDS = ("ip", "port", "behavior", "granularity_hint")
PLAN_FIELDS = ("ip", "port", "protocol", "retry_after_ms")


def _ms(seconds: float) -> float:
    return round(seconds * 1000.0, 3)


def record_to_dict(record, behavior: Optional[str] = None) -> Dict[str, Any]:
    """ScanRecord -> dict with exactly RECORD_FIELDS, in order."""
    return {
        "ip": record.ip,
        "port": record.port,
        "outcome": record.verdict.outcome.value,
        "refined_state": record.verdict.refined_state.value,
        "behavior": behavior or record.behavior.kind.value,
        "protocol": record.identified_protocol,
        "attempts": record.handshakes_attempted,
        "pkts_out": record.packets_sent,
        "pkts_in": record.packets_received,
        "ms": _ms(record.wall_time),
        "seq": record.seq,
        "error": record.error,
    }


def verdict_to_dict(target: Tuple[str, int], verdict: StateVerdict) -> Dict[str, Any]:
    return {
        "ip": target[0],
        "port": target[1],
        "outcome": verdict.outcome.value,
        "refined_state": verdict.refined_state.value,
        "synack_count": verdict.synack_count,
        "window": verdict.final_window,
        "ttl": verdict.ttl,
    }


def classification_to_dict(c) -> Dict[str, Any]:
    return {"ip": c.ip, "port": c.port, "behavior": c.label.kind.value,
            "granularity_hint": c.label.granularity_hint.value}


def plan_to_dict(record, retry_after: float) -> Dict[str, Any]:
    return {"ip": record.ip, "port": record.port, "protocol": record.identified_protocol,
            "retry_after_ms": _ms(retry_after)}


def dumps(row: Mapping[str, Any]) -> str:
    return json.dumps(row, separators=(",", ":"))


def check(row: Mapping[str, Any], fields: Tuple[str, ...]) -> None:
    missing = [f for f in fields if f not in row]
    if missing:
        raise ValueError(f"record lacks fields {missing}")
