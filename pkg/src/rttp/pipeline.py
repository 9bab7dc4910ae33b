"""Windowed aggregation and per-window trend ranking.

Events are bucketed into fixed windows by ``occurred_at // window_length``.
A window becomes rankable once sealed; sealing is driven by a watermark
(latest event time minus the allowed lateness) or done explicitly at the end
of a stream.

Three ranking methods are supported:

``volume_only``
    Queries whose organic search count bursts, ranked by search volume.
``volume_plus_generated``
    Generated queries count +1 per distinct supporting post on top of organic
    volume; bursts on that combined series plus every generated query in the
    window are ranked by combined volume.
``rttp_full``
    Generated queries scored by the summed trending score of their supporting
    posts, with organic bursts merged in through ``volume_to_score``.
"""

from __future__ import annotations

import enum
import heapq
import logging
import math
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from . import burst
from .domain import (
    Creator,
    EngagementEvent,
    Post,
    SearchLogEntry,
    Source,
    TrendCandidate,
)
from .querygen import GeneratorError, GeneratorRequest, GeneratorResponse, QueryGenerator
from .scoring import (
    EngagementWeights,
    aggregate_candidate_score,
    creator_authority,
    trending_score,
)

log = logging.getLogger(__name__)

Event = Union[Creator, Post, EngagementEvent, SearchLogEntry]


class MethodVariant(str, enum.Enum):
    VOLUME_ONLY = "volume_only"
    VOLUME_PLUS_GENERATED = "volume_plus_generated"
    RTTP_FULL = "rttp_full"


class WindowNotSealed(RuntimeError):
    def __init__(self, index: int):
        super().__init__(f"window not sealed: {index}")
        self.index = index


@dataclass(frozen=True)
class PipelineConfig:
    window_length: int = burst.DEFAULT_WINDOW
    allowed_lateness: int = 300
    weights: EngagementWeights = field(default_factory=EngagementWeights)
    history_len: int = burst.DEFAULT_HISTORY
    burst_threshold: float = burst.DEFAULT_THRESHOLD
    rate_floor: float = burst.DEFAULT_FLOOR
    volume_to_score: float = 1.0
    include_organic_bursts: bool = True
    max_queries: int = 3

    def __post_init__(self):
        if self.window_length <= 0:
            raise ValueError("window_length must be > 0")
        if self.allowed_lateness < 0:
            raise ValueError("allowed_lateness must be >= 0")
        if self.history_len < 1 or self.burst_threshold <= 0 or self.rate_floor <= 0:
            raise ValueError("invalid burst parameters")
        if not math.isfinite(self.volume_to_score) or self.volume_to_score < 0:
            raise ValueError("volume_to_score must be finite and >= 0")
        if self.max_queries < 1:
            raise ValueError("max_queries must be >= 1")


@dataclass
class _Window:
    index: int
    volume: Counter = field(default_factory=Counter)
    supporters: dict = field(default_factory=lambda: defaultdict(set))
    engagement: dict = field(default_factory=lambda: defaultdict(Counter))
    n_posts: int = 0
    n_engagements: int = 0
    n_searches: int = 0
    summary: Optional[dict] = None

    @property
    def sealed(self) -> bool:
        return self.summary is not None


class WindowStore:
    """Per-window aggregates plus the post and creator caches."""

    def __init__(self, window_length: int):
        self.window_length = window_length
        self.windows: dict[int, _Window] = {}
        self.creators: dict[str, Creator] = {}
        self.posts: dict[str, Post] = {}
        self.post_queries: dict[str, tuple[str, ...]] = {}
        self.first_window: Optional[int] = None

    def index_of(self, t: int) -> int:
        return t // self.window_length

    def window(self, index: int) -> _Window:
        w = self.windows.get(index)
        if w is None:
            w = self.windows[index] = _Window(index)
            if self.first_window is None or index < self.first_window:
                self.first_window = index
        return w

    def volume(self, index: int, query: str) -> int:
        w = self.windows.get(index)
        return w.volume.get(query, 0) if w else 0

    def combined_volume(self, index: int, query: str) -> int:
        w = self.windows.get(index)
        if w is None:
            return 0
        sup = w.supporters.get(query)
        return w.volume.get(query, 0) + (len(sup) if sup else 0)


class TrendPipeline:
    """Ingests creators, posts, engagement and search events; ranks sealed windows."""

    def __init__(self, generator: Optional[QueryGenerator], config: PipelineConfig = PipelineConfig()):
        self.generator = generator
        self.config = config
        self.store = WindowStore(config.window_length)
        self.counters: Counter = Counter()
        self.max_event_time: Optional[int] = None
        self._lock = threading.RLock()

    # -- ingestion ---------------------------------------------------------

    def ingest(self, event: Event, generated: Optional[GeneratorResponse] = None) -> bool:
        """Apply one event. Returns False when the event was dropped.

        For posts, ``generated`` may carry a response computed ahead of time
        (e.g. by a pool of workers); otherwise the configured generator runs.
        """
        if isinstance(event, Post) and generated is None:
            generated = self._generate(event)
        with self._lock:
            if isinstance(event, Creator):
                self.store.creators[event.creator_id] = event
                return True
            if isinstance(event, Post):
                return self._ingest_post(event, generated)
            if isinstance(event, EngagementEvent):
                return self._ingest_engagement(event)
            if isinstance(event, SearchLogEntry):
                return self._ingest_search(event)
        raise TypeError(f"unsupported event type: {type(event).__name__}")

    def _generate(self, post: Post) -> Optional[GeneratorResponse]:
        if self.generator is None:
            return None
        try:
            req = GeneratorRequest(post.post_id, post.title, post.body, self.config.max_queries)
            return self.generator.generate(req)
        except (GeneratorError, ValueError) as exc:
            self.counters["generator_failures"] += 1
            log.warning("skipping generation for post %s: %s", post.post_id, exc)
            return None

    def _open_window(self, t: int, kind: str) -> Optional[_Window]:
        w = self.store.window(self.store.index_of(t))
        if w.sealed:
            self.counters[f"late_{kind}"] += 1
            return None
        self._observe_time(t)
        return w

    def _observe_time(self, t: int) -> None:
        if self.max_event_time is None or t > self.max_event_time:
            self.max_event_time = t

    def _ingest_post(self, post: Post, generated: Optional[GeneratorResponse]) -> bool:
        if post.creator_id not in self.store.creators:
            self.counters["unknown_creator"] += 1
        w = self._open_window(post.created_at, "posts")
        if w is None:
            return False
        queries = tuple(generated.texts) if generated else ()
        self.store.posts[post.post_id] = post
        self.store.post_queries[post.post_id] = queries
        w.n_posts += 1
        w.engagement[post.post_id]  # register with zero engagement
        for q in queries:
            w.supporters[q].add(post.post_id)
        return True

    def _ingest_engagement(self, ev: EngagementEvent) -> bool:
        post = self.store.posts.get(ev.post_id)
        if post is None:
            self.counters["unknown_post"] += 1
            log.warning("dropping engagement for unknown post %s", ev.post_id)
            return False
        if ev.occurred_at < post.created_at:
            self.counters["engagement_before_post"] += 1
            return False
        w = self._open_window(ev.occurred_at, "engagements")
        if w is None:
            return False
        w.n_engagements += 1
        w.engagement[ev.post_id][ev.kind] += 1
        for q in self.store.post_queries[ev.post_id]:
            w.supporters[q].add(ev.post_id)
        return True

    def _ingest_search(self, entry: SearchLogEntry) -> bool:
        w = self._open_window(entry.occurred_at, "searches")
        if w is None:
            return False
        w.n_searches += 1
        w.volume[entry.query] += 1
        return True

    # -- sealing -----------------------------------------------------------

    @property
    def watermark(self) -> Optional[int]:
        if self.max_event_time is None:
            return None
        return self.max_event_time - self.config.allowed_lateness

    def sealable_windows(self) -> list[int]:
        wm = self.watermark
        if wm is None:
            return []
        L = self.config.window_length
        return sorted(i for i, w in self.store.windows.items() if not w.sealed and (i + 1) * L <= wm)

    def seal_ready(self) -> list[dict]:
        """Seal every window that the watermark has passed."""
        return [self.seal_window(i) for i in self.sealable_windows()]

    def seal_all(self) -> list[dict]:
        """End of stream: seal all known windows."""
        return [self.seal_window(i) for i in sorted(self.store.windows)]

    def seal_window(self, index: int) -> dict:
        with self._lock:
            w = self.store.window(index)
            if w.summary is None:
                w.summary = {
                    "window_index": index,
                    "window_start": index * self.config.window_length,
                    "posts": w.n_posts,
                    "engagements": w.n_engagements,
                    "searches": w.n_searches,
                    "queries": len(set(w.volume) | set(w.supporters)),
                    "dropped": dict(sorted(self.counters.items())),
                }
            return w.summary

    def is_sealed(self, index: int) -> bool:
        w = self.store.windows.get(index)
        return w is not None and w.sealed

    # -- ranking -----------------------------------------------------------

    def _bursts(self, index: int, queries: Iterable[str], combined: bool) -> dict[str, int]:
        """Queries (with their window count) whose series bursts at ``index``."""
        cfg = self.config
        first = self.store.first_window
        if first is None or index - first < cfg.history_len:
            return {}
        count = self.store.combined_volume if combined else self.store.volume
        out = {}
        for q in queries:
            observed = count(index, q)
            if observed == 0:
                continue
            history = [count(j, q) for j in range(index - cfg.history_len, index)]
            lam = burst.estimate_rate(history, cfg.rate_floor)
            if burst.poisson_surprise(observed, lam) >= cfg.burst_threshold:
                out[q] = observed
        return out

    def candidates(self, index: int, variant: MethodVariant | str) -> list[TrendCandidate]:
        """Every candidate of a sealed window, unordered."""
        variant = MethodVariant(variant)
        w = self.store.windows.get(index)
        if w is None or not w.sealed:
            raise WindowNotSealed(index)
        L = self.config.window_length
        start = index * L

        def make(q, score, source):
            posts = tuple(sorted(w.supporters.get(q, ())))
            return TrendCandidate(q, start, L, float(score), w.volume.get(q, 0), posts, source)

        def source_of(q):
            organic = w.volume.get(q, 0) > 0
            generated = bool(w.supporters.get(q))
            if organic and generated:
                return Source.BOTH
            return Source.GENERATED if generated else Source.ORGANIC

        if variant is MethodVariant.VOLUME_ONLY:
            bursts = self._bursts(index, w.volume, combined=False)
            return [TrendCandidate(q, start, L, float(v), v, (), Source.ORGANIC) for q, v in bursts.items()]

        if variant is MethodVariant.VOLUME_PLUS_GENERATED:
            pool = set(w.volume) | set(w.supporters)
            chosen = set(self._bursts(index, pool, combined=True)) | set(w.supporters)
            return [make(q, self.store.combined_volume(index, q), source_of(q)) for q in chosen]

        weights = self.config.weights
        scored: dict[str, float] = {}
        for q, posts in w.supporters.items():
            scored[q] = aggregate_candidate_score(
                trending_score(self._quality(p), w.engagement.get(p, {}), weights)
                for p in sorted(posts)
            )
        out = {q: make(q, s, Source.GENERATED) for q, s in scored.items()}
        if self.config.include_organic_bursts:
            factor = self.config.volume_to_score
            for q, v in self._bursts(index, w.volume, combined=False).items():
                if q in out:
                    out[q] = make(q, scored[q] + factor * v, Source.BOTH)
                else:
                    out[q] = make(q, factor * v, Source.ORGANIC)
        return list(out.values())

    def _quality(self, post_id: str) -> float:
        post = self.store.posts[post_id]
        creator = self.store.creators.get(post.creator_id)
        return creator_authority(creator) if creator is not None else 0.0

    def rank_window(self, index: int, variant: MethodVariant | str, k: int) -> list[TrendCandidate]:
        """Top ``k`` candidates by (score desc, search volume desc, query text)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        cands = self.candidates(index, variant)
        return heapq.nsmallest(k, cands, key=rank_key)

    def window_indices(self) -> list[int]:
        return sorted(self.store.windows)


def rank_key(c: TrendCandidate):
    return (-c.score, -c.search_volume, c.query)
