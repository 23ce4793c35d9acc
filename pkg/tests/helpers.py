
from ackscan.netsim import EndpointScript, NetConditions, spawn
from ackscan.netsim.scripts import Behavior


TIMESCALE = 0.001


def script(behavior, **kw):
    return EndpointScript(Behavior(behavior), **kw)


def sim(*pairs, loss=0.0, seed=0, latency=(0.01, 0.05), timescale=TIMESCALE, **kw):
    """SimNetwork from (ip, script) pairs."""
    return spawn(pairs, NetConditions(loss, latency, seed), timescale=timescale, **kw)




# criterion number -> PASS/FAIL line, printed by conftest at session end
ACCEPTANCE = {}
