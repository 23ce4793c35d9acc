"""End-to-end survey: discovery, engine scan and two-source classification.

Phases, each run concurrently across targets:

1. SYN discovery from the used source address.
2. Two-source SYN probe (used + first fresh address). A host that now
   ignores the used address but answers the fresh one is shunning.
3. Engine scan from the used address.
4. Second two-source probe (used + second fresh address) for hosts that
   either completed the handshake without acknowledging data (dynamic
   blocking check) or acknowledged it (shunning that triggers on data).

The order matters: shunning after a bare SYN-ACK and blocking after data
both look like "used address ignored" and are told apart only by what the
used address had done before the probe.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from . import engine as eng
from . import middlebox as mb
from . import registry as reg
from .deduce import Outcome, RefinedState
from .transport import Transport

Target = Tuple[str, int]


@dataclass
class PipelineConfig:
    engine: eng.EngineConfig = field(default_factory=eng.EngineConfig)
    probe: mb.ProbeConfig = field(default_factory=mb.ProbeConfig)
    used_ip: Optional[str] = None
    fresh_ips: Tuple[str, ...] = ()

    def sources(self, transport: Transport) -> Tuple[str, str, str]:
        used = self.used_ip or transport.source_ips[0]
        fresh = tuple(self.fresh_ips) or tuple(ip for ip in transport.source_ips if ip != used)
        if len(fresh) < 2:
            raise mb.MiddleboxError("classification needs a used and two fresh source addresses")
        if used in fresh[:2] or fresh[0] == fresh[1]:
            raise mb.MiddleboxError("source addresses must be distinct")
        return used, fresh[0], fresh[1]


@dataclass
class Classification:
    target: Target
    label: mb.BehaviorLabel
    record: Optional[eng.ScanRecord] = None
    discovery: Optional[mb.ProbeResponse] = None
    early: Optional[mb.TwoSourceProbeResult] = None
    late: Optional[mb.TwoSourceProbeResult] = None

    @property
    def ip(self) -> str:
        return self.target[0]

    @property
    def port(self) -> int:
        return self.target[1]

    @property
    def protocol(self) -> Optional[str]:
        if self.record is None or self.label.kind is mb.BehaviorKind.WILDCARD_ACKER:
            return None
        return self.record.identified_protocol


def _drive(transport: Transport, items: Sequence) -> None:
    transport.run_until(lambda: all(i.done for i in items))


def survey(targets: Iterable[Target], transport: Transport, config: Optional[PipelineConfig] = None,
           registry: Optional[reg.Registry] = None) -> List[Classification]:
    """Classify every target; results come back in input order."""
    cfg = config or PipelineConfig()
    registry = registry or reg.default_registry()
    used, fresh_a, fresh_b = cfg.sources(transport)
    probe_cfg = replace(cfg.probe, timescale=cfg.engine.timescale)
    targets = [tuple(t) for t in targets]

    discovery = [mb.SynProbe(transport, used, t, probe_cfg).start() for t in targets]
    _drive(transport, discovery)
    live = [p.target for p in discovery if p.result is mb.ProbeResponse.SYNACK]

    early = {t: mb.TwoSourceProbe(transport, t, used, fresh_a, probe_cfg).start() for t in live}
    _drive(transport, list(early.values()))

    records: Dict[Target, eng.ScanRecord] = {}
    for record in eng.run(eng.tasks_for(live, cfg.engine), cfg.engine, transport, registry, source_ip=used):
        records[tuple(record.target)] = record

    late: Dict[Target, mb.TwoSourceProbe] = {}
    for t, record in records.items():
        state = record.verdict.refined_state
        if state is RefinedState.ESTABLISHED_NO_ACK or record.verdict.outcome is Outcome.ACK_HOST:
            late[t] = mb.TwoSourceProbe(transport, t, used, fresh_b, probe_cfg).start()
    _drive(transport, list(late.values()))

    results = []
    for t, probe in zip(targets, discovery):
        record = records.get(t)
        if record is None:
            results.append(Classification(t, mb.NO_DEFENSE, discovery=probe.result))
            continue
        e = early[t].result
        l = late[t].result if t in late else None
        acked = record.verdict.outcome is Outcome.ACK_HOST
        shunning = e if mb.shunning_label(e).kind is not mb.BehaviorKind.NONE or not acked else l
        wildcard = record.behavior if record.behavior.kind is mb.BehaviorKind.WILDCARD_ACKER else None
        label = mb.classify(record.verdict, shunning=shunning, dynamic=None if acked else l, wildcard=wildcard)
        results.append(Classification(t, label, record, probe.result, e, l))
    return assign_granularity(results)


def assign_granularity(results: List[Classification]) -> List[Classification]:
    """Hint Host or Network from how many neighbours share the same defense."""
    by_kind: Dict[mb.BehaviorKind, List[str]] = defaultdict(list)
    for c in results:
        if c.label.kind is not mb.BehaviorKind.NONE:
            by_kind[c.label.kind].append(c.ip)
    for c in results:
        if c.label.kind is not mb.BehaviorKind.NONE:
            c.label = c.label.with_granularity(mb.granularity_hint(c.ip, by_kind[c.label.kind]))
    return results
