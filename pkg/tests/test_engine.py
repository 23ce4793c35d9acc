import pytest
from hypothesis import given, settings, strategies as st

from ackscan import engine as eng
from ackscan import registry as reg
from ackscan.deduce import Outcome, RefinedState
from ackscan.engine import (
    Abort, AbortReason, AckArrived, CloseThenNextHandshake, DataArrived, EngineConfig, Finish, Fingerprint,
    FlowPhase, ProtocolViolation, ResendAck, RetransmitSyn, RetransmitWithPush, RstOrFin, ScanTask, SendAckWithData,
    SynAckSeen, Timeout, next_action,
)
from ackscan.middlebox import BehaviorKind as K
from ackscan.netsim import SimNetwork
from ackscan.packet import Flags
from ackscan.transport import TransportError

from helpers import TIMESCALE, script, sim

CFG = EngineConfig(timescale=TIMESCALE)
PH = FlowPhase


# -- transition table --------------------------------------------------------------

@pytest.mark.parametrize("phase,event,kw,action", [
    (PH.SYN_SENT, SynAckSeen(0), {}, Abort(AbortReason.ZERO_WINDOW)),
    (PH.SYN_SENT, SynAckSeen(29200), {}, SendAckWithData()),
    (PH.SYN_SENT, RstOrFin(False), {}, Abort(AbortReason.NO_ACK)),
    (PH.SYN_SENT, Timeout(), {}, RetransmitSyn()),
    (PH.SYN_SENT, Timeout(), {"retransmitted": True}, Abort(AbortReason.NO_ACK)),
    (PH.DATA_SENT, Timeout(), {}, RetransmitWithPush()),
    (PH.DATA_SENT, Timeout(), {"retransmitted": True}, Abort(AbortReason.NO_ACK)),
    (PH.DATA_SENT, AckArrived(), {"plan_remaining": True}, CloseThenNextHandshake()),
    (PH.DATA_SENT, AckArrived(), {}, Finish()),
    (PH.DATA_SENT, RstOrFin(False), {"plan_remaining": True}, Abort(AbortReason.NO_ACK)),
    (PH.DATA_SENT, RstOrFin(True), {"plan_remaining": True}, CloseThenNextHandshake()),
    (PH.DATA_SENT, DataArrived(b"x"), {}, Fingerprint(b"x")),
    (PH.DATA_SENT, SynAckSeen(5, repeat=2), {}, ResendAck()),
    (PH.DATA_SENT, SynAckSeen(5, repeat=3), {}, Abort(AbortReason.NO_ACK)),
    (PH.WAITING, Timeout(), {"plan_remaining": True}, CloseThenNextHandshake()),
    (PH.WAITING, DataArrived(b"SSH-2.0"), {}, Fingerprint(b"SSH-2.0")),
])
def test_transition_table(phase, event, kw, action):
    assert next_action(phase, event, **kw) == action


@pytest.mark.parametrize("phase,event", [
    (PH.SYN_SENT, DataArrived(b"x")), (PH.SYN_SENT, AckArrived()), (PH.CLOSED, Timeout()),
    (PH.CLOSED, SynAckSeen(1)),
])
def test_protocol_violation(phase, event):
    with pytest.raises(ProtocolViolation, match="protocol violation"):
        next_action(phase, event)


EVENTS = st.one_of(st.builds(SynAckSeen, st.integers(0, 65535), st.integers(1, 9)),
                   st.builds(DataArrived, st.binary(min_size=1, max_size=4)), st.just(AckArrived()),
                   st.builds(RstOrFin, st.booleans()), st.just(Timeout()))


@given(st.sampled_from(list(PH)), EVENTS, st.booleans(), st.booleans())
def test_next_action_is_pure_and_total(phase, event, remaining, retx):
    try:
        a = next_action(phase, event, plan_remaining=remaining, retransmitted=retx)
    except ProtocolViolation:
        return
    assert a == next_action(phase, event, plan_remaining=remaining, retransmitted=retx)
    if isinstance(a, CloseThenNextHandshake):
        assert remaining  # never walks past the plan


def test_retry_delay_policy():
    assert eng.retry_delay_policy() == 5.0
    assert eng.retry_delay_policy(strict=True) == 120.0
    assert eng.retry_delay_policy(timescale=0.01) == pytest.approx(0.05)
    assert eng.retry_delay_policy(delay=600) == 120.0


# -- running against the simulator --------------------------------------------------

def scan_one(s, port, plan=eng.DEFAULT_PLAN, **cfg):
    net = sim(("10.0.0.1", s))
    config = EngineConfig(plan=plan, timescale=TIMESCALE, **cfg)
    (rec,) = eng.scan(eng.tasks_for([("10.0.0.1", port)], config), config, net)
    return rec, net


def out_segments(net, ip="10.0.0.1"):
    return [e.segment() for e in net.log if e.direction == "out" and e.segment().dst_ip == ip]


def test_tls_responder():
    rec, _ = scan_one(script("honest", protocol="tls", ports=(443,)), 443, plan=("tls",))
    assert (rec.identified_protocol, rec.handshakes_attempted) == ("tls", 1)
    assert rec.matched_by is reg.MatchedBy.EXPECTED_FIRST


def test_ssh_banner_found_by_sweep():
    rec, _ = scan_one(script("honest", protocol="ssh", ports=(2222,)), 2222, plan=("http", "tls"))
    assert (rec.identified_protocol, rec.handshakes_attempted) == ("ssh", 1)
    assert rec.matched_by is reg.MatchedBy.REGISTRY_SWEEP


def test_unidentifiable_acker_runs_whole_plan():
    rec, _ = scan_one(script("wildcard_acker"), 9999)
    assert rec.identified_protocol is None and rec.handshakes_attempted == 5
    assert rec.verdict.outcome is Outcome.ACK_HOST


def test_zero_window_one_packet_after_syn():
    rec, net = scan_one(script("zero_window"), 80)
    assert rec.behavior.kind is K.ZERO_WINDOW and rec.handshakes_attempted == 1
    sent = out_segments(net)
    assert rec.packets_sent == len(sent) == 2 and sent[0].flags == Flags.SYN
    assert sent[1].flags & Flags.RST


def test_non_acker_fails_fast():
    rec, net = scan_one(script("non_acker", ports=(80,)), 80, plan=("http", "tls", "dns"))
    data = [s for s in out_segments(net) if s.payload]
    assert len(data) == 2 and rec.handshakes_attempted == 1
    assert not data[0].flags & Flags.PSH and data[1].flags & Flags.PSH
    assert rec.verdict.refined_state is RefinedState.ESTABLISHED_NO_ACK


@pytest.mark.parametrize("proto", reg.SERVER_FIRST)
def test_single_packet_identification(proto):
    port = reg.default_registry().get(proto).ports[0]
    rec, net = scan_one(script("honest", protocol=proto, ports=(port,)), port)
    assert rec.identified_protocol == proto
    sent = out_segments(net)
    handshake_ack = next(i for i, s in enumerate(sent) if s.flags & Flags.ACK)
    assert len(sent) - handshake_ack - 1 <= 1


def test_option_sensitive_needs_right_variant():
    s = script("option_sensitive", protocol="pptp", ports=(1723,), accept_variant="good_cookie")
    rec, _ = scan_one(s, 1723, plan=("pptp:bad_cookie",))
    assert rec.identified_protocol is None
    rec, _ = scan_one(s, 1723, plan=("pptp:bad_cookie", "pptp:good_cookie"))
    assert (rec.identified_protocol, rec.handshakes_attempted) == ("pptp", 2)


def test_wildcard_stamped_and_protocol_cleared():
    rec, _ = scan_one(script("wildcard_acker"), 80, plan=("http",), wildcard_probe_count=5)
    assert rec.behavior.kind is K.WILDCARD_ACKER and rec.identified_protocol is None
    rec, _ = scan_one(script("honest", protocol="http", ports=(80,)), 80, wildcard_probe_count=5)
    assert rec.behavior.kind is K.NONE and rec.identified_protocol == "http"


def population():
    kinds = [("honest", {"protocol": "http", "ports": (80,)}), ("honest", {"protocol": "ssh", "ports": (80,)}),
             ("non_acker", {"ports": (80,)}), ("zero_window", {}), ("mid_handshake_dropper", {"ports": (80,)}),
             ("rst_after_handshake", {"ports": (80,)}), ("wildcard_acker", {}),
             ("honest", {"protocol": "tls", "ports": (80,)}), ("honest", {"protocol": "redis", "ports": (80,)})]
    return [(f"10.0.0.{i + 1}", script(b, **kw)) for i, (b, kw) in enumerate(kinds)]


def test_accounting_matches_wire_and_flow_counters():
    pop = population()
    net = sim(*pop)
    cfg = EngineConfig(timescale=TIMESCALE, wildcard_probe_count=5)
    records = eng.scan(eng.tasks_for([(ip, 80) for ip, _ in pop], cfg), cfg, net)
    net.settle()
    for rec in records:
        assert rec.packets_sent == sum(net.flows.sent(k) for k in rec.flows)
        assert rec.packets_sent == len(out_segments(net, rec.ip))
        assert rec.packets_received == sum(net.flows.received(k) for k in rec.flows)
        assert rec.handshakes_attempted <= len(eng.plan_for(80, cfg.plan))
    assert sorted(r.seq for r in records) == list(range(len(pop)))


def test_engine_cheaper_than_exhaustive_baseline():
    pop = population()
    totals = []
    for exhaustive in (False, True):
        net = sim(*pop)
        cfg = EngineConfig(timescale=TIMESCALE, exhaustive=exhaustive)
        totals.append(sum(r.packets_sent for r in eng.scan(eng.tasks_for([(ip, 80) for ip, _ in pop], cfg), cfg, net)))
    assert totals[0] < totals[1]


PLAN_ENTRIES = ["wait", "http", "tls", "dns", "pptp", "agnostic", "redis"]
BEHAVIORS = population()


@settings(max_examples=25)
@given(st.lists(st.sampled_from(PLAN_ENTRIES), min_size=1, max_size=6), st.sampled_from(BEHAVIORS),
       st.integers(0, 3))
def test_budget_bound(plan, placement, seed):
    net = sim(placement, seed=seed, loss=0.05)
    cfg = EngineConfig(plan=tuple(plan), timescale=TIMESCALE)
    (task,) = eng.tasks_for([(placement[0], 80)], cfg)
    (rec,) = eng.scan([task], cfg, net)
    assert 1 <= rec.handshakes_attempted <= len(task.handshake_plan) <= len(plan) + 1
    if rec.identified_protocol:
        assert rec.verdict.outcome is Outcome.ACK_HOST


def test_backpressure():
    pop = population()
    net = sim(*pop)
    cfg = EngineConfig(timescale=TIMESCALE, max_inflight=2)
    pulled = 0

    def tasks():
        nonlocal pulled
        for ip, _ in pop:
            pulled += 1
            yield ScanTask((ip, 80), cfg.plan)

    seen = 0
    for _ in eng.run(tasks(), cfg, net):
        seen += 1
        assert pulled - seen <= cfg.max_inflight
    assert seen == len(pop)


class FlakyNet(SimNetwork):
    def _transmit(self, wire):
        if wire[16:20] == bytes([10, 0, 0, 2]):
            raise TransportError("send failed")
        super()._transmit(wire)


def test_transport_failure_marks_record_and_continues():
    from ackscan.netsim.network import NetConditions
    from ackscan.netsim.scripts import Endpoint
    ok = script("honest", protocol="http", ports=(80,))
    net = FlakyNet([Endpoint("10.0.0.1", ok), Endpoint("10.0.0.2", ok), Endpoint("10.0.0.3", ok)],
                   NetConditions(), timescale=TIMESCALE)
    recs = {r.ip: r for r in eng.scan(eng.tasks_for([(f"10.0.0.{i}", 80) for i in (1, 2, 3)], CFG), CFG, net)}
    assert recs["10.0.0.2"].error == "send failed"
    assert recs["10.0.0.1"].identified_protocol == recs["10.0.0.3"].identified_protocol == "http"


def test_adopt_mode_continues_foreign_synacks():
    pop = population()[:2]
    net = sim(*pop)
    synacks = eng.SynSweep(net, [(ip, 80) for ip, _ in pop], timescale=TIMESCALE).run()
    assert len(synacks) == 2
    rows = [eng.synack_csv(s) for s in synacks]
    parsed = [eng.parse_synack_csv(r, ttl=s.ttl) for r, s in zip(rows, synacks)]
    assert parsed == synacks
    tasks = [ScanTask((s.src_ip, s.src_port), CFG.plan, s) for s in parsed]
    recs = {r.ip: r for r in eng.scan(tasks, CFG, net)}
    assert recs["10.0.0.1"].identified_protocol == "http"
    assert recs["10.0.0.2"].identified_protocol == "ssh"
    # the adopted connection sent no SYN of its own
    first = recs["10.0.0.2"].flows[0]
    on_flow = [e.segment() for e in net.log if e.direction == "out"
               and (e.segment().src_port, e.segment().dst_ip) == (first[1], first[2])]
    assert [bool(seg.flags & Flags.SYN) for seg in on_flow] == [True, False, False]  # sweep SYN, ACK, RST


def test_task_validation():
    with pytest.raises(ValueError):
        ScanTask(("10.0.0.1", 80), ())
    with pytest.raises(ValueError):
        EngineConfig(max_inflight=0)
    net = sim(("10.0.0.1", script("zero_window")))
    with pytest.raises(reg.RegistryError):
        list(eng.run([ScanTask(("10.0.0.1", 80), ("gopher",))], CFG, net))


@pytest.mark.parametrize("port,plan,want", [
    (80, ("wait", "http", "tls"), ("http", "wait", "tls")),
    (80, ("wait", "http:options", "tls"), ("http:options", "wait", "tls")),
    (22, ("http", "tls", "wait"), ("wait", "http", "tls")),
    (6379, ("wait", "http"), ("redis", "wait", "http")),
    (48302, ("wait", "http"), ("wait", "http")),
])
def test_plan_for_expected_first(port, plan, want):
    assert eng.plan_for(port, plan) == want


def test_expected_first_can_be_disabled():
    cfg = EngineConfig(plan=("wait", "tls"), expected_first=False)
    (task,) = eng.tasks_for([("10.0.0.1", 80)], cfg)
    assert task.handshake_plan == ("wait", "tls")
    (task,) = eng.tasks_for([("10.0.0.1", 80)], EngineConfig(plan=("wait", "tls")))
    assert task.handshake_plan == ("http", "wait", "tls")
