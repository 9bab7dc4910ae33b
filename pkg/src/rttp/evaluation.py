"""Ranking and generation metrics plus the retraining trigger."""

from __future__ import annotations

from dataclasses import dataclass
from typing import AbstractSet, Iterable, Sequence

from .domain import TrendCandidate

__all__ = [
    "RecallSample",
    "TriggerConfig",
    "recall_at_k",
    "precision_at_k",
    "should_retrain",
    "merge_rankings",
    "format_table",
]


@dataclass(frozen=True)
class RecallSample:
    post_id: str
    generated: tuple[str, ...]
    ground_truth: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "generated", tuple(self.generated))
        object.__setattr__(self, "ground_truth", frozenset(self.ground_truth))
        if not self.ground_truth:
            raise ValueError("ground_truth must be non-empty")


@dataclass(frozen=True)
class TriggerConfig:
    k: int = 3
    drop_threshold: float = 0.10
    baseline_recall: float = 0.0
    mode: str = "relative"  # or "absolute"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.drop_threshold < 1:
            raise ValueError("drop_threshold must be in (0, 1)")
        if not 0 <= self.baseline_recall <= 1:
            raise ValueError("baseline_recall must be in [0, 1]")
        if self.mode not in ("relative", "absolute"):
            raise ValueError("mode must be 'relative' or 'absolute'")


def recall_at_k(samples: Sequence[RecallSample], k: int = 3) -> float:
    """Share of posts with at least one ground-truth query in their top ``k``."""
    if not samples:
        raise ValueError("no samples")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = sum(1 for s in samples if s.ground_truth.intersection(s.generated[:k]))
    return hits / len(samples)


def precision_at_k(
    ranked: Sequence[TrendCandidate | str],
    labeled_true: AbstractSet[str],
    k: int,
) -> float:
    """|top-k ∩ labeled_true| / min(k, len(ranked)); 0.0 for an empty list."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not ranked:
        return 0.0
    top = [c if isinstance(c, str) else c.query for c in ranked[:k]]
    return sum(1 for q in top if q in labeled_true) / min(k, len(ranked))


def should_retrain(current_recall: float, cfg: TriggerConfig) -> bool:
    if cfg.baseline_recall <= 0:
        raise ValueError("uninitialized baseline")
    drop = cfg.baseline_recall - current_recall
    if cfg.mode == "relative":
        drop /= cfg.baseline_recall
    return drop > cfg.drop_threshold


def _rank_key(c: TrendCandidate):
    return (-c.score, -c.search_volume, c.query)


def merge_rankings(candidates: Iterable[TrendCandidate]) -> list[TrendCandidate]:
    """Collapse per-window rankings into one list: each query keeps its best
    window entry, ordered by (score desc, volume desc, query)."""
    best: dict[str, TrendCandidate] = {}
    for c in candidates:
        cur = best.get(c.query)
        if cur is None or _rank_key(c) < _rank_key(cur):
            best[c.query] = c
    return sorted(best.values(), key=_rank_key)


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
