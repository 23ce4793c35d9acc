"""Declarative scenario files for the simulator.

A scenario is TOML::

    seed = 7
    sources = ["192.0.2.1", "192.0.2.2", "192.0.2.3"]   # optional

    [conditions]
    loss = 0.02
    latency = [0.01, 0.05]      # seconds, fixed or [lo, hi]

    [[endpoints]]
    ip = "10.0.0.1"
    count = 20                  # expands to 20 consecutive addresses
    behavior = "honest"
    protocol = "http"
    ports = [80]
    scan_port = 80              # defaults to the first entry of ports

Any other key of an endpoint table is passed to ``EndpointScript``.
"""

from __future__ import annotations

import ipaddress
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .. import registry as reg
from .network import DEFAULT_SOURCES, NetConditions, SimNetwork, spawn
from .scripts import Behavior, EndpointScript

DEFAULT_SCAN_PORT = 80

_SCRIPT_FIELDS = {f.name for f in fields(EndpointScript)}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Placement:
    ip: str
    script: EndpointScript
    scan_port: int

    @property
    def target(self) -> Tuple[str, int]:
        return self.ip, self.scan_port


@dataclass
class Scenario:
    placements: List[Placement]
    conditions: NetConditions = NetConditions()
    sources: Tuple[str, ...] = DEFAULT_SOURCES

    def __post_init__(self) -> None:
        seen = set()
        for p in self.placements:
            if p.ip in seen:
                raise ScenarioError(f"duplicate endpoint ip {p.ip}")
            seen.add(p.ip)

    @property
    def seed(self) -> int:
        return self.conditions.seed

    def targets(self) -> List[Tuple[str, int]]:
        return [p.target for p in self.placements]

    def network(self, timescale: float = 1.0, **kwargs) -> SimNetwork:
        return spawn(((p.ip, p.script) for p in self.placements), self.conditions,
                     source_ips=self.sources, timescale=timescale, **kwargs)

    def with_conditions(self, **changes) -> "Scenario":
        cond = self.conditions
        merged = {"loss_probability": cond.loss_probability, "latency": cond.latency, "seed": cond.seed, **changes}
        return Scenario(self.placements, NetConditions(**merged), self.sources)


def build_script(spec: Dict[str, Any]) -> EndpointScript:
    params = {k: v for k, v in spec.items() if k in _SCRIPT_FIELDS}
    unknown = set(spec) - _SCRIPT_FIELDS - {"ip", "count", "scan_port"}
    if unknown:
        raise ScenarioError(f"unknown endpoint keys: {sorted(unknown)}")
    try:
        params["behavior"] = Behavior(params["behavior"])
    except KeyError:
        raise ScenarioError("endpoint needs a behavior") from None
    except ValueError:
        raise ScenarioError(f"unknown behavior {spec['behavior']!r}") from None
    for key in ("ports", "excluded_ports"):
        if key in params:
            params[key] = tuple(int(p) for p in params[key])
    try:
        return EndpointScript(**params)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc


def expand(spec: Dict[str, Any]) -> List[Placement]:
    script = build_script(spec)
    try:
        first = ipaddress.IPv4Address(spec["ip"])
    except KeyError:
        raise ScenarioError("endpoint needs an ip") from None
    count = int(spec.get("count", 1))
    if count < 1:
        raise ScenarioError("count must be positive")
    port = int(spec.get("scan_port", script.ports[0] if script.ports else DEFAULT_SCAN_PORT))
    return [Placement(str(first + i), script, port) for i in range(count)]


def from_dict(doc: Dict[str, Any]) -> Scenario:
    cond = doc.get("conditions", {})
    latency = cond.get("latency", 0.02)
    if isinstance(latency, list):
        latency = tuple(latency)
    conditions = NetConditions(float(cond.get("loss", 0.0)), latency, int(doc.get("seed", 0)))
    placements: List[Placement] = []
    for ep in doc.get("endpoints", []):
        placements.extend(expand(ep))
    sources = tuple(doc.get("sources", DEFAULT_SOURCES))
    if len(sources) < 3:
        raise ScenarioError("a scenario needs at least three source addresses")
    return Scenario(placements, conditions, sources)


def load(path: Union[str, Path]) -> Scenario:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from exc
    return from_dict(doc)


# -- ground truth ------------------------------------------------------------

GROUND_TRUTH_KIND = {
    Behavior.HONEST: "NoDefenseObserved",
    Behavior.OPTION_SENSITIVE: "NoDefenseObserved",
    Behavior.NON_ACKER: "NoDefenseObserved",
    Behavior.ZERO_WINDOW: "ZeroWindowProtection",
    Behavior.SHUNNER: "ConnectionShunning",
    Behavior.DYNAMIC_BLOCKER: "DynamicBlockAfterHandshake",
    Behavior.MID_HANDSHAKE_DROPPER: "MidHandshakeDrop",
    Behavior.RST_AFTER_HANDSHAKE: "RstAfterHandshake",
    Behavior.WILDCARD_ACKER: "WildcardAcker",
}


def ground_truth(script: EndpointScript, plan: Sequence[str],
                 registry: Optional[reg.Registry] = None) -> Tuple[str, Optional[str]]:
    """(behavior kind, protocol) the pipeline should report for ``script``.

    The protocol is the scripted one when the plan can reach it from the
    scanning address. Honest services count as reachable, so scenarios
    should only use protocols that are server-first, named in the plan, or
    answer a planned probe with their own signature. An option-sensitive
    service is reachable only if some plan entry sends its accepted variant.
    """
    registry = registry or reg.default_registry()
    kind = GROUND_TRUTH_KIND[script.behavior]
    if script.behavior is Behavior.HONEST and script.protocol:
        return kind, script.protocol
    if script.behavior is Behavior.SHUNNER and script.trigger == "on_data" and script.protocol:
        # shunning on SYN-ACK hides the service from the scanning address for good
        return kind, script.protocol
    if script.behavior is Behavior.OPTION_SENSITIVE:
        wanted = registry.payload(script.protocol, script.accept_variant)
        for entry in plan:
            name, variant = reg.parse_plan_entry(entry)
            if registry.payload(name, variant) == wanted:
                return kind, script.protocol
    return kind, None
