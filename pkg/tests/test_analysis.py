import itertools
import math
import random
from fractions import Fraction

import mpmath
import pytest
from hypothesis import given, strategies as st

from ackscan import analysis as an
from ackscan import engine as eng
from ackscan.analysis import AnalysisError, ResponseMatrix
from ackscan.schema import record_to_dict

import fixtures
from helpers import TIMESCALE, script, sim


# -- Grubbs ---------------------------------------------------------------------

def t_upper_quantile(p, df):
    """t with P(T > t) = p, by bisection on the regularized incomplete beta."""
    mpmath.mp.dps = 40
    target = mpmath.mpf(2) * p
    lo, hi = mpmath.mpf(0), mpmath.mpf(1)
    for _ in range(200):
        mid = (lo + hi) / 2
        # P(|T| > t) = I_x(df/2, 1/2) with x = df / (df + t^2), increasing in x
        if mpmath.betainc(mpmath.mpf(df) / 2, mpmath.mpf(1) / 2, 0, mid, regularized=True) < target:
            lo = mid
        else:
            hi = mid
    x = (lo + hi) / 2
    return mpmath.sqrt(df * (1 - x) / x)


def critical_oracle(n, alpha):
    t = t_upper_quantile(mpmath.mpf(alpha) / n, n - 2)
    return float((n - 1) / mpmath.sqrt(n) * mpmath.sqrt(t * t / (n - 2 + t * t)))


@pytest.mark.parametrize("n", [3, 4, 5, 6, 8, 10, 15, 20, 37, 100])
@pytest.mark.parametrize("alpha", [0.05, 0.01, 0.001])
def test_grubbs_critical_matches_oracle(n, alpha):
    assert an.grubbs_critical(n, alpha) == pytest.approx(critical_oracle(n, alpha), abs=5e-4)


@pytest.mark.parametrize("n,table", [(3, 1.153), (4, 1.463), (5, 1.672), (6, 1.822), (10, 2.176), (20, 2.557)])
def test_grubbs_critical_against_printed_table(n, table):
    # printed tables round to 3 decimals, so allow a little slack
    assert an.grubbs_critical(n, 0.05) == pytest.approx(table, abs=2e-3)


def test_grubbs_single_outlier():
    counts = dict(zip(range(1, 7), [1, 1, 1, 1, 1, 1000]))
    g = an.grubbs_statistic(list(counts.values()))
    assert g == pytest.approx(5 / math.sqrt(6), rel=1e-9)  # (n-1)/sqrt(n) is the largest G can be
    assert g > critical_oracle(6, 0.001)
    assert an.grubbs_split(counts) == ({6}, {1, 2, 3, 4, 5})


def test_grubbs_all_equal_is_empty():
    counts = {p: 42 for p in range(10)}
    assert an.grubbs_split(counts) == (set(), set(range(10)))


def test_grubbs_fixture_six_popular():
    counts = fixtures.port_counts()
    assert len(counts) == 37
    popular, unpopular = an.grubbs_split(counts, 0.999)
    assert popular == set(fixtures.POPULAR)
    assert unpopular == set(fixtures.TAIL_PORTS)


def test_grubbs_expected_service_gate():
    counts = fixtures.port_counts()
    flags = {p: p != 7547 for p in counts}
    popular, unpopular = an.grubbs_split(counts, 0.999, has_expected=flags)
    assert popular == set(fixtures.POPULAR) - {7547} and 7547 in unpopular


@given(st.floats(1e-3, 1e6))
def test_grubbs_scale_invariant(scale):
    counts = fixtures.port_counts()
    scaled = {p: c * scale for p, c in counts.items()}
    assert an.grubbs_split(scaled) == an.grubbs_split(counts)


@pytest.mark.parametrize("counts,conf", [({1: 1, 2: 2}, 0.99), ({1: 1, 2: 2, 3: 3}, 1.0), ({1: -1, 2: 2, 3: 3}, 0.9)])
def test_grubbs_errors(counts, conf):
    with pytest.raises(AnalysisError):
        an.grubbs_split(counts, conf)


# -- greedy ordering --------------------------------------------------------------

def covered(matrix, chosen):
    return sum(1 for row in matrix.cells
               if any(row[matrix.handshakes.index(h)] for h in chosen))


def stepwise_oracle(matrix, k):
    """For each step, every size-i superset of the previous prefix, scored by recount."""
    prefix = []
    for i in range(1, k + 1):
        best, best_set = -1, None
        for subset in itertools.combinations(sorted(matrix.handshakes), i):
            if not set(prefix) <= set(subset):
                continue
            score = covered(matrix, subset)
            if score > best:
                best, best_set = score, subset
        prefix.append(next(h for h in best_set if h not in prefix))
    return prefix


def random_matrix(rng):
    n_s, n_h = rng.randint(1, 12), rng.randint(1, 6)
    names = rng.sample(["wait", "http", "tls", "dns", "pptp", "ssh", "smb", "ftp"], n_h)
    density = rng.random()
    cells = tuple(tuple(rng.random() < density for _ in names) for _ in range(n_s))
    return ResponseMatrix(tuple(f"s{i}" for i in range(n_s)), tuple(names), cells)


def test_greedy_matches_exhaustive_oracle():
    rng = random.Random(2024)
    for _ in range(200):
        m = random_matrix(rng)
        k = rng.randint(0, len(m.handshakes))
        order = an.greedy_order(m, k)
        assert [h for h, _ in order] == stepwise_oracle(m, k)
        total = Fraction(covered(m, [h for h, _ in order]), len(m.services))
        assert sum(f for _, f in order) == total


@given(st.integers(0, 2**32))
def test_greedy_no_unchosen_column_does_better(seed):
    m = random_matrix(random.Random(seed))
    chosen = []
    for h, gain in an.greedy_order(m):
        base = covered(m, chosen)
        for other in set(m.handshakes) - set(chosen):
            assert covered(m, chosen + [other]) - base <= gain * len(m.services)
        chosen.append(h)


def test_table_fixture_order():
    order = an.greedy_order(fixtures.handshake_table(), 5)
    assert tuple(h for h, _ in order) == fixtures.ORDER
    assert [f for _, f in order] == [Fraction(m, 1000) for m in fixtures.MARGINALS]
    assert [round(float(f) * 100, 1) for _, f in order] == [51.3, 29.0, 13.6, 3.4, 1.8]


def test_greedy_trivial_and_errors():
    m = ResponseMatrix(("a", "b"), ("only",), ((True,), (True,)))
    assert an.greedy_order(m, 1) == [("only", Fraction(1))]
    tie = ResponseMatrix(("a",), ("zeta", "alpha"), ((True, True),))
    assert an.greedy_order(tie, 1)[0][0] == "alpha"
    with pytest.raises(AnalysisError):
        an.greedy_order(ResponseMatrix((), ("x",), ()), 1)
    with pytest.raises(AnalysisError):
        an.greedy_order(m, 2)
    with pytest.raises(AnalysisError):
        ResponseMatrix(("a",), (), ((),))
    with pytest.raises(AnalysisError):
        ResponseMatrix(("a",), ("x", "y"), ((True,),))


# -- coverage curve --------------------------------------------------------------

def test_coverage_trivial():
    assert an.coverage_curve([("a", 1), ("b", 1)], 3) == [1, 1, 1]
    assert an.coverage_curve([("a", None), ("b", None)], 2) == [0, 0]
    with pytest.raises(AnalysisError):
        an.coverage_curve([("a", 4)], 3)


@given(st.lists(st.one_of(st.none(), st.integers(1, 6)), min_size=1, max_size=50))
def test_coverage_monotone_and_final(indices):
    curve = an.coverage_curve(list(enumerate(indices)), 6)
    assert all(0 <= a <= b <= 1 for a, b in zip(curve, curve[1:]))
    assert curve[-1] == Fraction(sum(i is not None for i in indices), len(indices))


# (protocol, port, plan slot that identifies it); a TLS server answers the GET with an alert
MIX = [("ssh", 22, 1), ("http", 80, 2), ("tls", 443, 2), ("dns", 53, 4), ("pptp", 1723, 5)]


def test_coverage_from_simulated_population():
    pairs, targets = [], []
    for n, (proto, port, _) in enumerate(MIX * 3):
        ip = f"10.2.0.{n + 1}"
        pairs.append((ip, script("honest", protocol=proto, ports=(port,))))
        targets.append((ip, port))
    for n in range(5):
        ip = f"10.2.1.{n + 1}"
        pairs.append((ip, script("non_acker", ports=(80,))))
        targets.append((ip, 80))
    # plan as given, so each protocol lands on its own slot
    cfg = eng.EngineConfig(timescale=TIMESCALE, expected_first=False)
    records = eng.scan(eng.tasks_for(targets, cfg), cfg, sim(*pairs))
    idents = [(r.target, r.handshakes_attempted if r.identified_protocol else None) for r in records]
    curve = an.coverage_curve(idents, len(cfg.plan))
    # recount straight from the records
    recount = [Fraction(sum(1 for r in records if r.identified_protocol and r.handshakes_attempted <= i), 20)
               for i in range(1, 6)]
    assert curve == recount
    slots = [slot for _, _, slot in MIX]
    assert curve == [Fraction(3 * sum(s <= i for s in slots), 20) for i in range(1, 6)]


# -- L4 vs L7 --------------------------------------------------------------------

def population(n_honest, n_zero, n_non, n_ssh=0):
    pairs = []
    kinds = ([script("honest", protocol="http", ports=(80,))] * n_honest + [script("zero_window")] * n_zero
             + [script("non_acker", ports=(80,))] * n_non + [script("honest", protocol="ssh", ports=(80,))] * n_ssh)
    for n, s in enumerate(kinds):
        pairs.append((f"10.3.{n // 250}.{n % 250 + 1}", s))
    cfg = eng.EngineConfig(timescale=TIMESCALE)
    records = eng.scan(eng.tasks_for([(ip, 80) for ip, _ in pairs], cfg), cfg, sim(*pairs))
    return [record_to_dict(r) for r in records]


def test_discrepancy_population():
    rows = population(10, 30, 60)
    assert an.l4_l7_discrepancy(rows)[80].as_dict() == {
        "synack_count": 100, "ack_data_count": 10, "l7_expected_count": 10, "unexpected_count": 0}
    rows = population(10, 0, 0, n_ssh=5)
    assert an.l4_l7_discrepancy(rows)[80].unexpected_count == 5


def test_discrepancy_empty_and_permutation():
    assert an.l4_l7_discrepancy([]) == {}
    rows = [
        {"port": 80, "outcome": "AckHost", "refined_state": "AcknowledgesData", "protocol": "http"},
        {"port": 80, "outcome": "NoAckHost", "refined_state": "ZeroWindow", "protocol": None},
        {"port": 22, "outcome": "NoAckHost", "refined_state": "NeverSynAcked", "protocol": None},
        {"port": 22, "outcome": "AckHost", "refined_state": "AcknowledgesData", "protocol": "http"},
    ]
    want = an.l4_l7_discrepancy(rows)
    for perm in itertools.permutations(rows):
        assert an.l4_l7_discrepancy(perm) == want
    assert want[22].as_dict() == {"synack_count": 1, "ack_data_count": 1, "l7_expected_count": 0,
                                  "unexpected_count": 1}
