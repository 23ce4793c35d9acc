"""Offline math over scan results: handshake ordering, coverage, popular ports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, FrozenSet, Hashable, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from scipy import stats

from . import registry as reg


class AnalysisError(ValueError):
    pass


# -- handshake ordering -----------------------------------------------------

@dataclass(frozen=True)
class ResponseMatrix:
    """Which services (rows) get identified by which handshakes (columns)."""

    services: Tuple[str, ...]
    handshakes: Tuple[str, ...]
    cells: Tuple[Tuple[bool, ...], ...]

    def __post_init__(self) -> None:
        if not self.handshakes:
            raise AnalysisError("matrix needs at least one handshake")
        if len(self.cells) != len(self.services):
            raise AnalysisError("one row per service required")
        if any(len(row) != len(self.handshakes) for row in self.cells):
            raise AnalysisError("matrix is not rectangular")
        if len(set(self.handshakes)) != len(self.handshakes):
            raise AnalysisError("duplicate handshake identifier")

    @classmethod
    def from_sets(cls, covers: Mapping[str, Iterable[str]], services: Sequence[str]) -> "ResponseMatrix":
        names = tuple(covers)
        sets = {h: set(covers[h]) for h in names}
        return cls(tuple(services), names, tuple(tuple(s in sets[h] for h in names) for s in services))

    def column(self, handshake: str) -> FrozenSet[int]:
        j = self.handshakes.index(handshake)
        return frozenset(i for i, row in enumerate(self.cells) if row[j])

    def __getitem__(self, key: Tuple[str, str]) -> bool:
        service, handshake = key
        return self.cells[self.services.index(service)][self.handshakes.index(handshake)]


def greedy_order(matrix: ResponseMatrix, k: Optional[int] = None) -> List[Tuple[str, Fraction]]:
    """Pick ``k`` handshakes, each maximizing the services it newly identifies.

    Ties go to the lexicographically smallest identifier. Marginals are
    exact fractions of all services.
    """
    if not matrix.services:
        raise AnalysisError("empty matrix")
    k = len(matrix.handshakes) if k is None else k
    if not 0 <= k <= len(matrix.handshakes):
        raise AnalysisError("k exceeds the number of handshakes")
    columns = {h: matrix.column(h) for h in matrix.handshakes}
    total = len(matrix.services)
    covered: Set[int] = set()
    order: List[Tuple[str, Fraction]] = []
    left = sorted(matrix.handshakes)
    for _ in range(k):
        best = left[0]
        for h in left[1:]:  # sorted, so only a strictly larger gain displaces
            if len(columns[h] - covered) > len(columns[best] - covered):
                best = h
        gain = columns[best] - covered
        order.append((best, Fraction(len(gain), total)))
        covered |= gain
        left.remove(best)
    return order


def coverage_curve(identifications: Iterable[Tuple[Hashable, Optional[int]]],
                   plan_length: Optional[int] = None) -> List[Fraction]:
    """Cumulative identified fraction after 1, 2, ... handshakes.

    Each entry is (service, 1-based index of the identifying handshake),
    with ``None`` for services never identified.
    """
    found = [idx for _, idx in identifications]
    length = plan_length if plan_length is not None else max((i for i in found if i is not None), default=0)
    if any(i is not None and not 1 <= i <= length for i in found):
        raise AnalysisError("identification index outside the plan")
    if not found:
        return [Fraction(0)] * length
    counts = [0] * (length + 1)
    for i in found:
        if i is not None:
            counts[i] += 1
    curve, running = [], 0
    for i in range(1, length + 1):
        running += counts[i]
        curve.append(Fraction(running, len(found)))
    return curve


# -- popular ports ----------------------------------------------------------

def grubbs_critical(n: int, alpha: float) -> float:
    """One-sided critical value of the Grubbs statistic for sample size ``n``."""
    if n < 3:
        raise AnalysisError("Grubbs needs at least three observations")
    t = stats.t.ppf(1.0 - alpha / n, n - 2)
    return (n - 1) / math.sqrt(n) * math.sqrt(t * t / (n - 2 + t * t))


def grubbs_statistic(values: Sequence[float]) -> float:
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    if var <= 0:
        return 0.0
    return (max(values) - mean) / math.sqrt(var)


def grubbs_split(counts: Mapping[int, float], confidence: float = 0.999,
                 has_expected: Optional[Mapping[int, bool]] = None) -> Tuple[Set[int], Set[int]]:
    """Peel off high outliers one at a time; they form the popular set.

    With ``has_expected`` given, an outlier only counts as popular if its
    flag is set; otherwise it drops into the unpopular set.
    """
    if len(counts) < 3:
        raise AnalysisError("need at least three ports")
    if not 0 < confidence < 1:
        raise AnalysisError("confidence must be within (0, 1)")
    if any(c < 0 for c in counts.values()):
        raise AnalysisError("counts must be non-negative")
    alpha = 1.0 - confidence
    pool = dict(counts)
    outliers: List[int] = []
    while len(pool) >= 3:
        values = list(pool.values())
        g = grubbs_statistic(values)
        if g <= grubbs_critical(len(values), alpha):
            break
        top = min(pool, key=lambda p: (-pool[p], p))
        outliers.append(top)
        del pool[top]
    popular = {p for p in outliers if has_expected is None or has_expected.get(p, False)}
    return popular, set(counts) - popular


# -- L4 versus L7 -------------------------------------------------------------

@dataclass
class DiscrepancyRow:
    synack_count: int = 0
    ack_data_count: int = 0
    l7_expected_count: int = 0
    unexpected_count: int = 0

    def as_dict(self) -> Dict[str, int]:
        return dict(self.__dict__)


def l4_l7_discrepancy(records: Iterable[Mapping]) -> Dict[int, DiscrepancyRow]:
    """Per-port counts from JSON-shaped records (see ``schema.record_to_dict``)."""
    table: Dict[int, DiscrepancyRow] = {}
    for rec in records:
        port = int(rec["port"])
        row = table.setdefault(port, DiscrepancyRow())
        if rec["refined_state"] != "NeverSynAcked":
            row.synack_count += 1
        if rec["outcome"] == "AckHost":
            row.ack_data_count += 1
        proto = rec.get("protocol")
        if proto:
            if proto == reg.EXPECTED_BY_PORT.get(port):
                row.l7_expected_count += 1
            else:
                row.unexpected_count += 1
    return dict(sorted(table.items()))
