"""Query generators: turn a post into a short ranked list of search queries.

Three interchangeable implementations share one contract (:class:`QueryGenerator`):

* :class:`ExtractiveGenerator` scores title / first-sentence n-grams.
* :class:`TemplateGenerator` adds expansions from a term -> queries knowledge
  table ahead of the extractive candidates.
* :class:`RemoteGenerator` posts the request to an HTTP endpoint.
"""

from __future__ import annotations

import json
import logging
import re
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

from .domain import GeneratedQuery, normalize_query, read_jsonl

log = logging.getLogger(__name__)

DEFAULT_K = 3
MAX_NGRAM = 4

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


class GeneratorError(Exception):
    """Base class for per-call generator failures."""


class GeneratorUnavailable(GeneratorError):
    def __init__(self, message: str = "generator unavailable"):
        super().__init__(message)


class ProtocolViolation(GeneratorError):
    def __init__(self, detail: str, payload: bytes | str = b""):
        super().__init__(f"protocol violation: {detail}")
        self.payload = payload


class ConfigurationError(Exception):
    """Raised at startup for bad generator configuration (e.g. a missing file)."""


@dataclass(frozen=True)
class GeneratorRequest:
    post_id: str
    title: str
    body: str
    max_queries: int = DEFAULT_K

    def __post_init__(self):
        if self.max_queries < 1:
            raise ValueError("max_queries must be >= 1")
        if not (self.title or self.body):
            raise ValueError("title or body must be non-empty")


@dataclass(frozen=True)
class GeneratorResponse:
    queries: tuple[GeneratedQuery, ...] = ()
    location: Optional[tuple[str, Optional[str]]] = None

    @property
    def texts(self) -> list[str]:
        return [q.text for q in self.queries]


class QueryGenerator(Protocol):
    generator_id: str

    def generate(self, req: GeneratorRequest) -> GeneratorResponse: ...


def _pack(
    req: GeneratorRequest,
    texts: Sequence[str],
    generator_id: str,
    location: Optional[tuple[str, Optional[str]]] = None,
) -> GeneratorResponse:
    out: list[str] = []
    seen: set[str] = set()
    for raw in texts:
        text = normalize_query(raw)
        if text and text not in seen:
            seen.add(text)
            out.append(text)
        if len(out) == req.max_queries:
            break
    queries = tuple(
        GeneratedQuery(req.post_id, text, rank, location, generator_id)
        for rank, text in enumerate(out, start=1)
    )
    return GeneratorResponse(queries, location)


def first_sentence(body: str) -> str:
    """Body text up to the first '.', '!' or '?' that is followed by whitespace."""
    body = body.strip()
    if not body:
        return ""
    return _SENTENCE_END.split(body, maxsplit=1)[0]


def _segments(req: GeneratorRequest) -> tuple[list[str], list[str]]:
    title = normalize_query(req.title).split()
    lead = normalize_query(first_sentence(req.body)).split()
    return title, lead


def _ngrams(tokens: Sequence[str], offset: int):
    for n in range(1, MAX_NGRAM + 1):
        for i in range(len(tokens) - n + 1):
            yield " ".join(tokens[i : i + n]), n, offset + i


def extractive_candidates(req: GeneratorRequest) -> list[str]:
    """All title/first-sentence n-grams, best first.

    Score is n-gram length plus 2 when the n-gram occurs in the title; ties go
    to the earlier position, then to lexicographic order.
    """
    title, lead = _segments(req)
    title_grams = {g for g, _, _ in _ngrams(title, 0)}
    best: dict[str, tuple[int, int]] = {}
    for gram, n, pos in [*_ngrams(title, 0), *_ngrams(lead, len(title))]:
        score = n + (2 if gram in title_grams else 0)
        if gram not in best or pos < best[gram][1]:
            best[gram] = (score, pos)
    return sorted(best, key=lambda g: (-best[g][0], best[g][1], g))


def extractive_generate(req: GeneratorRequest) -> GeneratorResponse:
    return _pack(req, extractive_candidates(req), "extractive")


def load_knowledge(path: str | Path) -> dict[str, list[str]]:
    """Read a knowledge table from JSONL rows ``{"term": ..., "queries": [...]}``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"knowledge file not found: {path}")
    table: dict[str, list[str]] = {}
    for row in read_jsonl(path):
        term = normalize_query(row["term"])
        if not term:
            continue
        bucket = table.setdefault(term, [])
        for q in row.get("queries", []):
            q = normalize_query(q)
            if q and q not in bucket:
                bucket.append(q)
    return table


def _find(tokens: Sequence[str], needle: Sequence[str]) -> int:
    n = len(needle)
    for i in range(len(tokens) - n + 1):
        if list(tokens[i : i + n]) == list(needle):
            return i
    return -1


def template_generate(
    req: GeneratorRequest,
    knowledge: Mapping[str, Sequence[str]],
    seed: int = 0,
) -> GeneratorResponse:
    """Knowledge-table expansions first, then extractive candidates.

    Matched terms are ordered by where they first occur (title before first
    sentence), longer terms first on ties. ``seed`` is accepted so every local
    generator has the same signature; the ordering rule is fully deterministic.
    """
    del seed
    title, lead = _segments(req)
    matches: list[tuple[int, int, str]] = []
    for term, expansions in knowledge.items():
        toks = term.split()
        pos = _find(title, toks)
        if pos < 0:
            pos = _find(lead, toks)
            if pos >= 0:
                pos += len(title)
        if pos >= 0 and expansions:
            matches.append((pos, -len(toks), term))
    matches.sort()
    expansions = [q for _, _, term in matches for q in knowledge[term]]
    return _pack(req, [*expansions, *extractive_candidates(req)], "template")


class ExtractiveGenerator:
    generator_id = "extractive"

    def generate(self, req: GeneratorRequest) -> GeneratorResponse:
        return extractive_generate(req)


class TemplateGenerator:
    generator_id = "template"

    def __init__(self, knowledge: Mapping[str, Sequence[str]], seed: int = 0):
        self.knowledge = {normalize_query(k): list(v) for k, v in knowledge.items()}
        self.seed = seed

    @classmethod
    def from_file(cls, path: str | Path, seed: int = 0) -> "TemplateGenerator":
        return cls(load_knowledge(path), seed)

    def generate(self, req: GeneratorRequest) -> GeneratorResponse:
        return template_generate(req, self.knowledge, self.seed)


# ---------------------------------------------------------------------------
# Remote generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RemoteConfig:
    url: str
    timeout: float = 10.0
    retries: int = 2
    backoff_base: float = 0.5
    max_in_flight: int = 8

    def __post_init__(self):
        if not self.url:
            raise ValueError("remote generator url is required")
        if self.timeout <= 0 or self.retries < 0 or self.max_in_flight < 1:
            raise ValueError("invalid remote generator settings")


class _Retryable(Exception):
    pass


def _parse_response(req: GeneratorRequest, raw: bytes) -> GeneratorResponse:
    try:
        doc = json.loads(raw.decode("utf-8"))
        items = doc["queries"]
        if not isinstance(items, list):
            raise TypeError("queries is not a list")
        ranked = sorted(items, key=lambda it: int(it["rank"]))
        texts = [str(it["text"]) for it in ranked]
        loc = doc.get("location")
        location = None
        if loc:
            location = (str(loc["country"]), loc.get("state"))
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise ProtocolViolation(str(exc), raw) from exc
    return _pack(req, texts, "remote", location)


def _post_once(cfg: RemoteConfig, req: GeneratorRequest) -> bytes:
    body = json.dumps(
        {
            "post_id": req.post_id,
            "title": req.title,
            "body": req.body,
            "max_queries": req.max_queries,
        }
    ).encode("utf-8")
    http_req = urllib.request.Request(
        cfg.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
    )
    try:
        with urllib.request.urlopen(http_req, timeout=cfg.timeout) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        payload = exc.read() if exc.fp is not None else b""
        if exc.code >= 500:
            raise _Retryable(f"HTTP {exc.code}") from exc
        raise ProtocolViolation(f"HTTP {exc.code}", payload) from exc
    except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
        raise _Retryable(str(exc)) from exc


def remote_generate(
    req: GeneratorRequest,
    cfg: RemoteConfig,
    sleep: Callable[[float], None] = time.sleep,
) -> GeneratorResponse:
    """POST ``req`` to ``cfg.url``; retry transport failures with exponential backoff."""
    attempts = 1 + cfg.retries
    for attempt in range(attempts):
        try:
            raw = _post_once(cfg, req)
        except _Retryable as exc:
            log.warning("generator call for %s failed (attempt %d/%d): %s",
                        req.post_id, attempt + 1, attempts, exc)
            if attempt + 1 < attempts:
                sleep(cfg.backoff_base * (2 ** attempt))
            continue
        return _parse_response(req, raw)
    raise GeneratorUnavailable()


class RemoteGenerator:
    """Thread-safe client; at most ``max_in_flight`` requests run at once."""

    generator_id = "remote"

    def __init__(self, cfg: RemoteConfig, sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)

    def generate(self, req: GeneratorRequest) -> GeneratorResponse:
        with self._slots:
            return remote_generate(req, self.cfg, self._sleep)
