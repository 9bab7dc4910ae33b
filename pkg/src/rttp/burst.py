"""Poisson burst detection over per-window search counts.

Each window's count is compared against a Poisson rate estimated from the
trailing history. The burst statistic ("surprise") is the negative natural log
of the upper tail probability P(X >= observed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DEFAULT_FLOOR",
    "DEFAULT_HISTORY",
    "DEFAULT_THRESHOLD",
    "DEFAULT_WINDOW",
    "QueryVolumeSeries",
    "BurstEvent",
    "estimate_rate",
    "poisson_surprise",
    "detect_bursts",
]

DEFAULT_FLOOR = 0.5
DEFAULT_HISTORY = 24
DEFAULT_THRESHOLD = 9.0
DEFAULT_WINDOW = 3600

# Stop adding upper-tail terms once the geometric remainder bound is this
# small relative to the running sum.
_TAIL_RTOL = 1e-18


@dataclass(frozen=True)
class QueryVolumeSeries:
    query: str
    counts: tuple[int, ...]
    window_length: int = DEFAULT_WINDOW

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if not counts:
            raise ValueError("counts must be non-empty")
        if any(c < 0 for c in counts):
            raise ValueError("counts must be non-negative")
        if self.window_length <= 0:
            raise ValueError("window_length must be > 0")
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True)
class BurstEvent:
    query: str
    window_index: int
    observed: int
    expected_rate: float
    surprise: float


def estimate_rate(history: Sequence[int], floor: float = DEFAULT_FLOOR) -> float:
    """Floored trailing mean."""
    if len(history) == 0:
        raise ValueError("no history")
    if floor <= 0:
        raise ValueError("floor must be > 0")
    return max(floor, math.fsum(history) / len(history))


def _log_pmf(k: int, lam: float) -> float:
    return -lam + k * math.log(lam) - math.lgamma(k + 1)


def _log_upper_tail(n: int, lam: float) -> float:
    """log P(X >= n) by summing pmf(n) * prod_{j<=m} lam/(n+j) until the
    geometric bound on what remains is negligible. Requires n > lam."""
    total = 1.0
    term = 1.0
    j = 1
    while True:
        ratio = lam / (n + j)
        term *= ratio
        total += term
        # remaining terms are bounded by term * r/(1-r), r = lam/(n+j+1)
        r = lam / (n + j + 1)
        if term * r / (1.0 - r) <= _TAIL_RTOL * total:
            break
        j += 1
    return _log_pmf(n, lam) + math.log(total)


def poisson_surprise(observed: int, lam: float) -> float:
    """-ln P(X >= observed) for X ~ Poisson(lam).

    Counts well above the rate sum the upper tail directly (the complement
    ``1 - CDF`` would cancel catastrophically); otherwise the lower CDF is
    summed in log space and the tail is ``log1p(-CDF)``.
    """
    if not lam > 0 or not math.isfinite(lam):
        raise ValueError("invalid rate")
    if observed < 0:
        raise ValueError("observed must be >= 0")
    if observed == 0:
        return 0.0
    if observed > lam + 2.0 * math.sqrt(lam):
        return max(0.0, -_log_upper_tail(observed, lam))
    ks = np.arange(observed, dtype=float)
    log_terms = -lam + ks * math.log(lam) - np.array([math.lgamma(k + 1) for k in range(observed)])
    cdf = math.exp(logsumexp(log_terms))
    return max(0.0, -math.log1p(-cdf))


def detect_bursts(
    series: QueryVolumeSeries,
    history_len: int = DEFAULT_HISTORY,
    threshold: float = DEFAULT_THRESHOLD,
    floor: float = DEFAULT_FLOOR,
) -> list[BurstEvent]:
    """Windows whose count is surprising given the previous ``history_len`` windows."""
    if history_len < 1:
        raise ValueError("history_len must be >= 1")
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    counts = series.counts
    events = []
    for i in range(history_len, len(counts)):
        lam = estimate_rate(counts[i - history_len : i], floor)
        s = poisson_surprise(counts[i], lam)
        if s >= threshold:
            events.append(BurstEvent(series.query, i, counts[i], lam, s))
    return events
