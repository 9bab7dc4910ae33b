"""Shared builders for pipeline-level tests."""

from __future__ import annotations

import numpy as np

from rttp.domain import Creator, EngagementEvent, GeneratedQuery, Post, SearchLogEntry
from rttp.pipeline import PipelineConfig, TrendPipeline
from rttp.querygen import GeneratorResponse

KINDS = ("reaction", "comment", "reshare", "click")


class FixedGenerator:
    """Returns a preset query list per post id."""

    generator_id = "fixed"

    def __init__(self, table: dict[str, list[str]]):
        self.table = table

    def generate(self, req):
        qs = self.table.get(req.post_id, [])[: req.max_queries]
        return GeneratorResponse(tuple(GeneratedQuery(req.post_id, q, i + 1, None, "fixed") for i, q in enumerate(qs)))


def random_window_events(rng: np.random.Generator, window: int = 30, L: int = 3600, history: int = 24):
    """Creators, posts and events spread over ``history`` quiet windows plus one busy window.

    Returns (creators, posts, generator table, engagements, searches).
    """
    vocab = [f"q{i}" for i in range(int(rng.integers(3, 12)))]
    creators = [Creator(f"c{i}", int(rng.integers(0, 5000)), (("v", float(rng.integers(0, 3))),) if rng.random() < 0.3 else ())
                for i in range(5)]
    start = (window - history) * L
    posts, table, engagements, searches = [], {}, [], []
    for i in range(int(rng.integers(0, 8))):
        t = int(window * L + rng.integers(0, L // 2))
        pid = f"p{i}"
        posts.append(Post(pid, creators[int(rng.integers(len(creators)))].creator_id, f"title {i}", "", t))
        table[pid] = list(rng.choice(vocab, size=int(rng.integers(0, 4)), replace=False))
        for _ in range(int(rng.integers(0, 15))):
            engagements.append(EngagementEvent(pid, KINDS[int(rng.integers(4))], t + int(rng.integers(1, L // 2)), "u"))
    for w in range(history + 1):
        busy = w == history
        for q in vocab:
            n = int(rng.poisson(8.0 if busy and rng.random() < 0.4 else 1.0))
            for _ in range(n):
                searches.append(SearchLogEntry(q, int(start + w * L + rng.integers(0, L))))
    return creators, posts, table, engagements, searches


def run_pipeline(creators, posts, table, events, config: PipelineConfig = PipelineConfig(history_len=24)) -> TrendPipeline:
    pipe = TrendPipeline(FixedGenerator(table), config)
    for c in creators:
        pipe.ingest(c)
    for p in sorted(posts, key=lambda p: p.created_at):
        pipe.ingest(p)
    for e in events:
        pipe.ingest(e)
    pipe.seal_all()
    return pipe
