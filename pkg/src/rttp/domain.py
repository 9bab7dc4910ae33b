"""Core records shared across the package, JSONL I/O, and query normalization."""

from __future__ import annotations

import enum
import json
import math
import os
import unicodedata
from dataclasses import dataclass, field, fields
from typing import Any, Iterable, Iterator, Optional

__all__ = [
    "Creator",
    "Post",
    "EngagementKind",
    "EngagementEvent",
    "GeneratedQuery",
    "SearchLogEntry",
    "Source",
    "TrendCandidate",
    "normalize_query",
    "to_record",
    "from_record",
    "read_jsonl",
    "write_jsonl",
]

# Characters treated as apostrophes / hyphens; all are folded to ASCII.
_APOSTROPHES = {"'": "'", "’": "'", "ʼ": "'"}
_HYPHENS = {"-": "-", "‐": "-", "‑": "-"}
_MAX_PASSES = 8


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or unicodedata.category(ch).startswith("M")


def _normalize_pass(text: str) -> str:
    text = unicodedata.normalize("NFKC", text)
    text = unicodedata.normalize("NFKC", text.lower())

    kept: list[str] = []
    for ch in text:
        if ch in _APOSTROPHES:
            kept.append(_APOSTROPHES[ch])
        elif ch in _HYPHENS:
            kept.append(_HYPHENS[ch])
        elif ch.isspace():
            kept.append(" ")
        else:
            cat = unicodedata.category(ch)
            if cat[0] == "P" or cat in ("Cc", "Cf", "Cs", "Co", "Cn"):
                continue
            kept.append(ch)

    # An apostrophe or hyphen survives only between two word characters.
    out: list[str] = []
    for i, ch in enumerate(kept):
        if ch in ("'", "-"):
            prev = kept[i - 1] if i > 0 else ""
            nxt = kept[i + 1] if i + 1 < len(kept) else ""
            if not (prev and nxt and _is_word_char(prev) and _is_word_char(nxt)):
                continue
        out.append(ch)
    return " ".join("".join(out).split())


def normalize_query(raw: str) -> str:
    """Canonical form of a query string.

    NFKC folding, lowercasing, punctuation removal (intra-word apostrophes and
    hyphens are kept) and whitespace collapsing. Returns ``""`` when the input
    has no letters or digits; callers treat that as "no query".

    >>> normalize_query("  Taylor   SWIFT  ")
    'taylor swift'
    >>> normalize_query("Mounts of Mayhem!!!")
    'mounts of mayhem'
    """
    text = raw
    for _ in range(_MAX_PASSES):
        nxt = _normalize_pass(text)
        if nxt == text:
            break
        text = nxt
    if not any(ch.isalnum() for ch in text):
        return ""
    return text


def _require_normalized(value: str, what: str) -> None:
    if not value:
        raise ValueError(f"{what} must be non-empty")
    if normalize_query(value) != value:
        raise ValueError(f"{what} is not normalized: {value!r}")


class EngagementKind(str, enum.Enum):
    REACTION = "reaction"
    COMMENT = "comment"
    RESHARE = "reshare"
    CLICK = "click"


class Source(str, enum.Enum):
    ORGANIC = "organic"
    GENERATED = "generated"
    BOTH = "both"


@dataclass(frozen=True)
class Creator:
    creator_id: str
    follower_count: int = 0
    authority_signals: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if not self.creator_id:
            raise ValueError("creator_id must be non-empty")
        if self.follower_count < 0:
            raise ValueError("follower_count must be >= 0")
        signals = tuple((str(name), float(value)) for name, value in self.authority_signals)
        for name, value in signals:
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"authority signal {name!r} must be finite and >= 0")
        object.__setattr__(self, "authority_signals", signals)


@dataclass(frozen=True)
class Post:
    post_id: str
    creator_id: str
    title: str
    body: str
    created_at: int
    ground_truth_queries: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.post_id:
            raise ValueError("post_id must be non-empty")
        if self.created_at <= 0:
            raise ValueError("created_at must be > 0")
        gts = frozenset(self.ground_truth_queries)
        for q in gts:
            _require_normalized(q, "ground truth query")
        object.__setattr__(self, "ground_truth_queries", gts)


@dataclass(frozen=True)
class EngagementEvent:
    post_id: str
    kind: EngagementKind
    occurred_at: int
    actor_id: str

    def __post_init__(self):
        object.__setattr__(self, "kind", EngagementKind(self.kind))


@dataclass(frozen=True)
class GeneratedQuery:
    post_id: str
    text: str
    rank: int
    location: Optional[tuple[str, Optional[str]]] = None
    generator_id: str = ""

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        _require_normalized(self.text, "generated query")
        if self.location is not None:
            object.__setattr__(self, "location", tuple(self.location))


@dataclass(frozen=True)
class SearchLogEntry:
    query: str
    occurred_at: int
    engaged_post_id: Optional[str] = None

    def __post_init__(self):
        _require_normalized(self.query, "search query")


@dataclass(frozen=True)
class TrendCandidate:
    query: str
    window_start: int
    window_length: int
    score: float
    search_volume: int
    supporting_posts: tuple[str, ...] = ()
    source: Source = Source.ORGANIC

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("score must be finite")
        if self.search_volume < 0:
            raise ValueError("search_volume must be >= 0")
        source = Source(self.source)
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "supporting_posts", tuple(self.supporting_posts))
        if source is not Source.ORGANIC and not self.supporting_posts:
            raise ValueError("generated candidates need supporting posts")


# ---------------------------------------------------------------------------
# JSONL schemas
# ---------------------------------------------------------------------------


def to_record(obj) -> dict[str, Any]:
    """Plain-JSON dict for one of the record types above."""
    rec: dict[str, Any] = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, enum.Enum):
            value = value.value
        elif isinstance(value, frozenset):
            value = sorted(value)
        elif f.name == "authority_signals":
            value = [[name, v] for name, v in value]
        elif f.name == "location" and value is not None:
            value = {"country": value[0], "state": value[1]}
        elif isinstance(value, tuple):
            value = list(value)
        rec[f.name] = value
    return rec


def from_record(cls, rec: dict[str, Any]):
    """Inverse of :func:`to_record`; unknown keys are an error."""
    names = {f.name for f in fields(cls)}
    extra = set(rec) - names
    if extra:
        raise ValueError(f"unexpected fields for {cls.__name__}: {sorted(extra)}")
    kwargs = dict(rec)
    if cls is Creator and "authority_signals" in kwargs:
        kwargs["authority_signals"] = tuple(tuple(s) for s in kwargs["authority_signals"])
    if cls is Post and "ground_truth_queries" in kwargs:
        kwargs["ground_truth_queries"] = frozenset(kwargs["ground_truth_queries"])
    if cls is GeneratedQuery and kwargs.get("location") is not None:
        loc = kwargs["location"]
        kwargs["location"] = (loc["country"], loc.get("state"))
    if cls is TrendCandidate and "supporting_posts" in kwargs:
        kwargs["supporting_posts"] = tuple(kwargs["supporting_posts"])
    return cls(**kwargs)


def read_jsonl(path: str | os.PathLike) -> Iterator[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | os.PathLike, rows: Iterable[dict[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n
