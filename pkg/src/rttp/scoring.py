"""Creator authority and engagement-weighted trending scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from .domain import Creator, EngagementKind

__all__ = [
    "EngagementWeights",
    "creator_authority",
    "trending_score",
    "aggregate_candidate_score",
]


@dataclass(frozen=True)
class EngagementWeights:
    """Per-kind engagement weights.

    Comments must outweigh reactions; every weight is finite and non-negative.
    """

    reaction: float = 1.0
    comment: float = 3.0
    reshare: float = 2.0
    click: float = 0.5

    def __post_init__(self):
        for kind in EngagementKind:
            w = getattr(self, kind.value)
            if not math.isfinite(w) or w < 0:
                raise ValueError(f"weight for {kind.value} must be finite and >= 0")
        if not self.comment > self.reaction:
            raise ValueError("comment weight must exceed reaction weight")

    @classmethod
    def from_mapping(cls, weights: Mapping[str, float]) -> "EngagementWeights":
        missing = {k.value for k in EngagementKind} - set(weights)
        if missing:
            raise ValueError(f"missing engagement weights: {sorted(missing)}")
        return cls(**{k.value: float(weights[k.value]) for k in EngagementKind})

    def weight(self, kind: EngagementKind | str) -> float:
        return getattr(self, EngagementKind(kind).value)

    def scaled(self, factor: float) -> "EngagementWeights":
        return EngagementWeights(**{k.value: self.weight(k) * factor for k in EngagementKind})


def creator_authority(creator: Creator) -> float:
    """ln(max(1, followers)) plus the sum of the creator's authority signals."""
    base = math.log(max(1, creator.follower_count))
    return base + math.fsum(value for _, value in creator.authority_signals)


def trending_score(
    quality: float,
    counts: Mapping[EngagementKind | str, int],
    weights: EngagementWeights,
) -> float:
    """Creator quality plus the weighted sum of engagement counts.

    Kinds absent from ``counts`` count as zero.
    """
    terms = [weights.weight(kind) * n for kind, n in counts.items()]
    return quality + math.fsum(terms)


def aggregate_candidate_score(post_scores: Iterable[float]) -> float:
    scores = list(post_scores)
    if not scores:
        raise ValueError("no supporting posts")
    return math.fsum(scores)
