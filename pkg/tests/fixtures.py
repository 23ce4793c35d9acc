"""Fixtures shared by the analysis and acceptance tests."""

from ackscan.analysis import ResponseMatrix

POPULAR = {80: 52000, 443: 41000, 7547: 30500, 22: 21000, 21: 14500, 25: 11000}
TAIL_PORTS = [8080, 8443, 3389, 53, 110, 143, 993, 995, 587, 465, 23, 5900, 3306, 1433, 1723, 5060, 6379,
              27017, 11211, 5672, 1883, 5432, 1521, 445, 102, 502, 20000, 179, 623, 631, 6443]


def port_counts():
    """37 ports: six dominant ones over a long, mildly varied tail."""
    counts = dict(POPULAR)
    counts.update({p: 600 + 37 * ((p * 7919) % 97) for p in TAIL_PORTS})
    return counts


ORDER = ("wait", "tls", "http", "dns", "pptp")
MARGINALS = (513, 290, 136, 34, 18)   # per mille of 1000 services; 9 stay unidentified
N_SERVICES = 1000


def handshake_table():
    """1000 services with disjoint blocks per handshake, plus overlaps.

    On its own http reaches 336 services (more than tls's 290), but 200 of
    those are already covered by wait, so greedy must still put tls second.
    dns and pptp overlap earlier blocks too, which only changes their
    standalone coverage.
    """
    blocks, start = {}, 0
    for name, size in zip(ORDER, MARGINALS):
        blocks[name] = set(range(start, start + size))
        start += size
    blocks["http"] |= set(range(0, 200))
    blocks["dns"] |= set(range(513, 600))
    blocks["pptp"] |= set(range(803, 830))
    services = [f"s{i:04d}" for i in range(N_SERVICES)]
    covers = {h: {services[i] for i in blocks[h]} for h in sorted(blocks)}
    return ResponseMatrix.from_sets(covers, services)
