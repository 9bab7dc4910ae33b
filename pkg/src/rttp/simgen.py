"""Deterministic synthetic worlds for end-to-end runs.

A world has creators, posts, engagement, and search logs, plus the planted
trends that serve as labels. Head trends are search-heavy with moderate
engagement. Tail trends are search-sparse, have high engagement, and come
from high-authority creators, so organic volume alone cannot find them. Decoy
spikes are non-trend queries whose search volume jumps once; they are not
labelled as trends.

Trend posts either name the trend query in their title ("direct") or use an
oblique alias. ``knowledge.jsonl`` maps aliases to trend queries for the
template generator.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import (
    Creator,
    EngagementEvent,
    EngagementKind,
    Post,
    SearchLogEntry,
    to_record,
    write_jsonl,
)
from .mixdpo import TabularPolicy

__all__ = [
    "WorldConfig",
    "PlantedTrend",
    "WorldTruth",
    "World",
    "build_world",
    "generate_world",
    "write_world",
    "read_truth",
    "generate_preference_world",
    "STREAM_FILES",
]

STREAM_FILES = ("creators.jsonl", "posts.jsonl", "engagements.jsonl", "searches.jsonl")

_KIND_PROBS = {
    EngagementKind.REACTION: 0.55,
    EngagementKind.CLICK: 0.20,
    EngagementKind.COMMENT: 0.15,
    EngagementKind.RESHARE: 0.10,
}
_ONSETS = "b c d f g h j k l m n p r s t v z br dr kr pl st tr".split()
_VOWELS = "a e i o u ai ea io ou".split()
_CODAS = ["", "", "n", "r", "s", "x", "l", "m"]


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 42
    n_creators: int = 400
    n_posts: int = 600  # background (non-trend) posts
    horizon: int = 48  # windows
    window_length: int = 3600
    n_head_trends: int = 20
    n_tail_trends: int = 20
    head_search_rate: float = 40.0
    tail_search_rate: float = 0.2
    tail_engagement_multiplier: float = 4.0
    background_query_rate: float = 2.0
    vocabulary_size: int = 3000
    start_time: int = 1_700_006_400
    warmup_windows: int = 24
    trend_active_windows: int = 3
    head_posts_per_window: int = 6
    tail_posts_per_window: int = 3
    base_engagement: float = 30.0
    background_engagement: float = 3.0
    engagement_delay: float = 900.0
    n_background_queries: int = 300
    n_noise_spikes: int = 25
    n_aliases: int = 3
    direct_title_fraction: float = 0.5
    knowledge_coverage: float = 1.0
    follower_mu: float = 6.0
    follower_sigma: float = 2.0
    verified_fraction: float = 0.1
    verified_bonus: float = 2.0

    def __post_init__(self):
        rates = (self.head_search_rate, self.tail_search_rate, self.background_query_rate,
                 self.base_engagement, self.background_engagement)
        if any(r < 0 or not math.isfinite(r) for r in rates):
            raise ValueError("rates must be finite and >= 0")
        if not self.tail_search_rate < self.head_search_rate:
            raise ValueError("tail_search_rate must be below head_search_rate")
        if not self.tail_engagement_multiplier > 1:
            raise ValueError("tail_engagement_multiplier must be > 1")
        if self.n_creators < 1 or self.horizon < 1 or self.window_length < 1:
            raise ValueError("n_creators, horizon and window_length must be >= 1")
        if min(self.n_posts, self.n_head_trends, self.n_tail_trends, self.n_noise_spikes) < 0:
            raise ValueError("counts must be >= 0")
        if self.n_head_trends + self.n_tail_trends == 0 and self.background_query_rate == 0 and self.n_posts == 0:
            raise ValueError("empty world")
        if self.n_head_trends + self.n_tail_trends and not (
            0 <= self.warmup_windows and 1 <= self.trend_active_windows <= self.horizon - self.warmup_windows
        ):
            raise ValueError("trend activity must fit between warmup_windows and horizon")
        if self.n_noise_spikes > self.n_background_queries:
            raise ValueError("n_noise_spikes exceeds n_background_queries")
        if self.start_time % self.window_length:
            raise ValueError("start_time must be aligned to window_length")
        for name in ("direct_title_fraction", "knowledge_coverage", "verified_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")


@dataclass(frozen=True)
class PlantedTrend:
    query: str
    active_windows: tuple[int, ...]  # absolute window indices
    kind: str  # "head" | "tail"
    aliases: tuple[str, ...] = ()


@dataclass
class WorldTruth:
    planted_trends: list[PlantedTrend]
    ground_truth: dict[str, frozenset[str]]  # post_id -> queries
    decoys: list[str] = field(default_factory=list)

    @property
    def trend_queries(self) -> set[str]:
        return {t.query for t in self.planted_trends}

    def of_kind(self, kind: str) -> list[PlantedTrend]:
        return [t for t in self.planted_trends if t.kind == kind]


@dataclass
class World:
    config: WorldConfig
    creators: list[Creator]
    posts: list[Post]
    engagements: list[EngagementEvent]
    searches: list[SearchLogEntry]
    knowledge: dict[str, list[str]]
    truth: WorldTruth


def _vocabulary(rng: np.random.Generator, size: int, exclude: set[str] = frozenset()) -> list[str]:
    words: list[str] = []
    seen = set(exclude)
    while len(words) < size:
        n = int(rng.integers(2, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n)
        ) + _CODAS[rng.integers(len(_CODAS))]
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class _Phrases:
    """Hands out distinct multi-word phrases from a word list."""

    def __init__(self, rng: np.random.Generator, words: list[str]):
        self.rng = rng
        self.words = words
        self.used: set[str] = set()

    def take(self, n_words: int) -> str:
        while True:
            idx = self.rng.choice(len(self.words), size=n_words, replace=False)
            phrase = " ".join(self.words[i] for i in idx)
            if phrase not in self.used:
                self.used.add(phrase)
                return phrase

    def words_(self, n: int) -> str:
        return " ".join(self.words[i] for i in self.rng.integers(0, len(self.words), size=n))


def build_world(cfg: WorldConfig) -> World:
    """Build the whole world in memory. Identical configs give identical worlds."""
    rng = np.random.default_rng(cfg.seed)
    L = cfg.window_length
    w0 = cfg.start_time // L
    t_end = cfg.start_time + cfg.horizon * L
    words = _vocabulary(rng, cfg.vocabulary_size)
    phrases = _Phrases(rng, words)

    # creators
    followers = np.rint(rng.lognormal(cfg.follower_mu, cfg.follower_sigma, size=cfg.n_creators)).astype(np.int64)
    verified = rng.random(cfg.n_creators) < cfg.verified_fraction
    creators = []
    for i in range(cfg.n_creators):
        signals = (("meta_verified", cfg.verified_bonus),) if verified[i] else ()
        creators.append(Creator(f"c{i:05d}", int(followers[i]), signals))
    authority = np.log(np.maximum(1, followers)) + verified * cfg.verified_bonus
    n_top = max(1, cfg.n_creators // 10)
    top_creators = np.argsort(-authority, kind="stable")[:n_top]

    # trends
    trends: list[PlantedTrend] = []
    knowledge: dict[str, list[str]] = {}
    for kind, n in (("head", cfg.n_head_trends), ("tail", cfg.n_tail_trends)):
        for _ in range(n):
            query = phrases.take(2)
            aliases = tuple(phrases.take(3) for _ in range(cfg.n_aliases))
            start = int(rng.integers(cfg.warmup_windows, cfg.horizon - cfg.trend_active_windows + 1))
            active = tuple(w0 + start + j for j in range(cfg.trend_active_windows))
            trends.append(PlantedTrend(query, active, kind, aliases))
            for alias in aliases:
                if rng.random() < cfg.knowledge_coverage:
                    knowledge[alias] = [query]

    # posts: (created_at, creator index, title, body, ground truth, engagement mean)
    drafts = []
    for tr in trends:
        per_window = cfg.head_posts_per_window if tr.kind == "head" else cfg.tail_posts_per_window
        mean_eng = cfg.base_engagement * (cfg.tail_engagement_multiplier if tr.kind == "tail" else 1.0)
        for w in tr.active_windows:
            for _ in range(per_window):
                t = int(w * L + rng.integers(0, L))
                if rng.random() < cfg.direct_title_fraction or not tr.aliases:
                    head = tr.query
                else:
                    head = tr.aliases[rng.integers(len(tr.aliases))]
                title = f"{head} {phrases.words_(1)}"
                body = f"{phrases.words_(6)}. {phrases.words_(8)}."
                if tr.kind == "tail":
                    author = int(top_creators[rng.integers(len(top_creators))])
                else:
                    author = int(rng.integers(cfg.n_creators))
                drafts.append((t, author, title, body, frozenset([tr.query]), mean_eng))
    for _ in range(cfg.n_posts):
        t = int(cfg.start_time + rng.integers(0, cfg.horizon * L))
        title = phrases.words_(int(rng.integers(3, 6)))
        body = f"{phrases.words_(6)}. {phrases.words_(8)}."
        drafts.append((t, int(rng.integers(cfg.n_creators)), title, body, frozenset(), cfg.background_engagement))
    drafts.sort(key=lambda d: (d[0], d[2]))

    posts: list[Post] = []
    engagements: list[EngagementEvent] = []
    kinds = list(_KIND_PROBS)
    kind_p = np.array([_KIND_PROBS[k] for k in kinds])
    for i, (t, author, title, body, gts, mean_eng) in enumerate(drafts):
        pid = f"p{i:06d}"
        posts.append(Post(pid, creators[author].creator_id, title, body, t, gts))
        n_eng = int(rng.poisson(mean_eng))
        if n_eng == 0:
            continue
        delays = 1 + np.floor(rng.exponential(cfg.engagement_delay, size=n_eng)).astype(np.int64)
        which = rng.choice(len(kinds), size=n_eng, p=kind_p)
        actors = rng.integers(0, 10**7, size=n_eng)
        for d, k, a in zip(delays, which, actors):
            when = t + int(d)
            if when < t_end:
                engagements.append(EngagementEvent(pid, kinds[k], when, f"u{int(a):07d}"))

    # searches
    taken = {t.query for t in trends} | set(knowledge)
    background = []
    while len(background) < cfg.n_background_queries:
        q = phrases.take(int(rng.integers(1, 3)))
        if q not in taken:
            background.append(q)
    decoys = [background[i] for i in rng.choice(len(background), size=cfg.n_noise_spikes, replace=False)] if cfg.n_noise_spikes else []
    posts_by_window: dict[tuple[str, int], list[str]] = {}
    for p in posts:
        for q in p.ground_truth_queries:
            posts_by_window.setdefault((q, p.created_at // L), []).append(p.post_id)

    searches: list[SearchLogEntry] = []

    def emit(query: str, window: int, n: int, link: bool = False):
        times = window * L + rng.integers(0, L, size=n)
        for tt in times:
            engaged = None
            cands = posts_by_window.get((query, window)) if link else None
            if cands and rng.random() < 0.3:
                engaged = cands[int(rng.integers(len(cands)))]
            searches.append(SearchLogEntry(query, int(tt), engaged))

    counts = rng.poisson(cfg.background_query_rate, size=(cfg.horizon, len(background)))
    for wi in range(cfg.horizon):
        for qi, q in enumerate(background):
            if counts[wi, qi]:
                emit(q, w0 + wi, int(counts[wi, qi]))
    for q in decoys:
        wi = int(rng.integers(cfg.warmup_windows, cfg.horizon)) if cfg.warmup_windows < cfg.horizon else 0
        emit(q, w0 + wi, int(rng.poisson(cfg.head_search_rate)))
    for tr in trends:
        rate = cfg.head_search_rate if tr.kind == "head" else cfg.tail_search_rate
        for w in tr.active_windows:
            emit(tr.query, w, int(rng.poisson(rate)), link=True)

    engagements.sort(key=lambda e: (e.occurred_at, e.post_id, e.actor_id, e.kind.value))
    searches.sort(key=lambda s: (s.occurred_at, s.query, s.engaged_post_id or ""))
    truth = WorldTruth(
        planted_trends=trends,
        ground_truth={p.post_id: p.ground_truth_queries for p in posts if p.ground_truth_queries},
        decoys=sorted(decoys),
    )
    return World(cfg, creators, posts, engagements, searches, knowledge, truth)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_world(world: World, out_dir: str | Path) -> dict[str, str]:
    """Write the streams, ``knowledge.jsonl`` and ``truth.jsonl``; return sha256 per file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "creators.jsonl", (to_record(c) for c in world.creators))
    write_jsonl(out / "posts.jsonl", (to_record(p) for p in world.posts))
    write_jsonl(out / "engagements.jsonl", (to_record(e) for e in world.engagements))
    write_jsonl(out / "searches.jsonl", (to_record(s) for s in world.searches))
    write_jsonl(
        out / "knowledge.jsonl",
        ({"term": term, "queries": qs} for term, qs in sorted(world.knowledge.items())),
    )
    L = world.config.window_length
    write_jsonl(
        out / "truth.jsonl",
        (
            {
                "query": t.query,
                "kind": t.kind,
                "active_windows": list(t.active_windows),
                "window_length": L,
                "aliases": list(t.aliases),
            }
            for t in world.truth.planted_trends
        ),
    )
    names = [*STREAM_FILES, "knowledge.jsonl", "truth.jsonl"]
    return {name: _digest(out / name) for name in names}


def generate_world(cfg: WorldConfig, out_dir: str | Path) -> WorldTruth:
    world = build_world(cfg)
    write_world(world, out_dir)
    return world.truth


def read_truth(path: str | Path) -> list[PlantedTrend]:
    from .domain import read_jsonl

    return [
        PlantedTrend(r["query"], tuple(r["active_windows"]), r["kind"], tuple(r.get("aliases", ())))
        for r in read_jsonl(path)
    ]


# ---------------------------------------------------------------------------
# Preference-learning world
# ---------------------------------------------------------------------------


def generate_preference_world(
    n_contexts: int = 200,
    vocab_size: int = 50,
    seed: int = 42,
    logit_scale: float = 2.0,
    n_ground_truth: int = 2,
    novel_fraction: float = 0.1,
    k: int = 3,
) -> tuple[TabularPolicy, list[Post], dict[str, list[str]]]:
    """A starting policy plus posts with ground truth and the policy's own top-k generations.

    Each post is one context. Most posts draw their ground-truth queries from
    the starting policy (what the model already knows); a ``novel_fraction``
    draw them uniformly (emerging topics the model has not seen).
    """
    if n_ground_truth > vocab_size:
        raise ValueError("n_ground_truth exceeds vocab_size")
    rng = np.random.default_rng(seed)
    vocab = _vocabulary(rng, vocab_size)
    contexts = [f"x{i:04d}" for i in range(n_contexts)]
    logits = rng.normal(0.0, logit_scale, size=(n_contexts, vocab_size))
    policy = TabularPolicy(contexts, vocab, logits)
    probs = policy.probs()
    posts, generations = [], {}
    for i, ctx in enumerate(contexts):
        if rng.random() < novel_fraction:
            idx = rng.choice(vocab_size, size=n_ground_truth, replace=False)
        else:
            idx = rng.choice(vocab_size, size=n_ground_truth, replace=False, p=probs[i])
        gts = frozenset(vocab[j] for j in idx)
        posts.append(Post(ctx, "c00000", f"post {i}", "", 1 + i, gts))
        generations[ctx] = policy.top(ctx, k)
    return policy, posts, generations
