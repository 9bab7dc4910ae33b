"""Command-line entry point: ``rttp simulate | run | eval | train``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Every command loads and validates its config and input paths before it
creates or writes anything under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, load_config
from .domain import (
    Creator,
    EngagementEvent,
    Post,
    SearchLogEntry,
    TrendCandidate,
    from_record,
    read_jsonl,
    write_jsonl,
)
from .evaluation import (
    RecallSample,
    format_table,
    merge_rankings,
    precision_at_k,
    recall_at_k,
    should_retrain,
)
from .mixdpo import (
    PairPool,
    PolicyKind,
    TabularPolicy,
    build_pairs,
    policy_from_generations,
    squeeze_diagnostic,
    train,
    win_rate,
)
from .pipeline import TrendPipeline
from .querygen import (
    ConfigurationError,
    ExtractiveGenerator,
    GeneratorError,
    GeneratorRequest,
    GeneratorResponse,
    RemoteGenerator,
    TemplateGenerator,
    load_knowledge,
)
from .simgen import PlantedTrend, build_world, read_truth, write_world

log = logging.getLogger("rttp")

# order in which same-timestamp events are applied
_STREAMS = (
    ("creators.jsonl", Creator, None),
    ("posts.jsonl", Post, "created_at"),
    ("engagements.jsonl", EngagementEvent, "occurred_at"),
    ("searches.jsonl", SearchLogEntry, "occurred_at"),
)


class UsageError(Exception):
    """Missing or inconsistent command-line inputs (exit code 2)."""


def _json(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _require_dir(path: Optional[str], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{flag} directory not found: {p}")
    return p


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    world = build_world(cfg.world)
    digests = write_world(world, out)
    truth = world.truth
    rows = [
        {"item": "creators", "count": len(world.creators)},
        {"item": "posts", "count": len(world.posts)},
        {"item": "engagements", "count": len(world.engagements)},
        {"item": "searches", "count": len(world.searches)},
        {"item": "head trends", "count": len(truth.of_kind("head"))},
        {"item": "tail trends", "count": len(truth.of_kind("tail"))},
    ]
    print(format_table(rows, ["item", "count"]))
    print()
    for name, digest in digests.items():
        print(f"sha256 {digest}  {name}")
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _make_generator(cfg: RunConfig, events: Path):
    gen = cfg.generator
    if gen.kind == "extractive":
        return ExtractiveGenerator()
    if gen.kind == "remote":
        return RemoteGenerator(gen.remote)
    if gen.knowledge is not None:
        path = Path(gen.knowledge)
        if not path.is_absolute() and cfg.source is not None:
            path = Path(cfg.source).parent / path
        try:
            return TemplateGenerator(load_knowledge(path), gen.seed)
        except ConfigurationError as exc:
            raise ConfigError(str(exc)) from exc
    default = events / "knowledge.jsonl"
    if not default.is_file():
        log.warning("no knowledge table at %s; template generator falls back to extraction", default)
        return TemplateGenerator({}, gen.seed)
    return TemplateGenerator(load_knowledge(default), gen.seed)


def load_events(events: Path) -> list:
    """All records from the stream files, in application order."""
    keyed = []
    for order, (name, cls, time_field) in enumerate(_STREAMS):
        path = events / name
        if not path.is_file():
            continue
        for seq, rec in enumerate(read_jsonl(path)):
            obj = from_record(cls, rec)
            t = getattr(obj, time_field) if time_field else -1
            keyed.append(((t, order, seq), obj))
    keyed.sort(key=lambda kv: kv[0])
    return [obj for _, obj in keyed]


def _pregenerate(generator, posts: Sequence[Post], cfg: RunConfig) -> dict[str, GeneratorResponse]:
    """Call a remote generator concurrently; failed posts get an empty response."""
    k = cfg.pipeline.max_queries

    def one(post: Post) -> GeneratorResponse:
        try:
            return generator.generate(GeneratorRequest(post.post_id, post.title, post.body, k))
        except (GeneratorError, ValueError) as exc:
            log.warning("skipping generation for post %s: %s", post.post_id, exc)
            return GeneratorResponse()

    workers = max(1, cfg.generator.remote.max_in_flight)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        responses = list(pool.map(one, posts))
    return {p.post_id: r for p, r in zip(posts, responses)}


def cmd_run(cfg: RunConfig, events: Path, out: Path) -> int:
    generator = _make_generator(cfg, events)
    stream = load_events(events)
    out.mkdir(parents=True, exist_ok=True)

    pipe = TrendPipeline(generator, cfg.pipeline)
    pre: dict[str, GeneratorResponse] = {}
    if cfg.generator.kind == "remote":
        pre = _pregenerate(generator, [e for e in stream if isinstance(e, Post)], cfg)
        failed = sum(1 for r in pre.values() if not r.queries)
        pipe.counters["generator_failures"] += failed

    L = cfg.pipeline.window_length
    summaries: list[dict] = []
    last_window = None
    for event in stream:
        pipe.ingest(event, pre.get(event.post_id) if isinstance(event, Post) else None)
        t = getattr(event, "occurred_at", getattr(event, "created_at", None))
        if t is not None and t // L != last_window:
            last_window = t // L
            summaries += pipe.seal_ready()
    summaries += pipe.seal_all()
    summaries = sorted({s["window_index"]: s for s in summaries}.values(), key=lambda s: s["window_index"])

    counts = []
    for method in cfg.methods:
        rows = []
        for index in pipe.window_indices():
            for rank, c in enumerate(pipe.rank_window(index, method, cfg.rank_k), start=1):
                rows.append({
                    "window_start": c.window_start,
                    "rank": rank,
                    "query": c.query,
                    "score": c.score,
                    "search_volume": c.search_volume,
                    "source": c.source.value,
                    "supporting_posts": list(c.supporting_posts),
                })
        write_jsonl(out / f"rankings_{method.value}.jsonl", rows)
        counts.append({"method": method.value, "candidates": len(rows)})

    write_jsonl(
        out / "generations.jsonl",
        ({"post_id": pid, "queries": list(qs)} for pid, qs in sorted(pipe.store.post_queries.items())),
    )
    write_jsonl(out / "windows.jsonl", summaries)
    summary = {
        "generator": cfg.generator.kind,
        "windows": len(summaries),
        "posts": len(pipe.store.posts),
        "counters": dict(sorted(pipe.counters.items())),
        "candidates": {r["method"]: r["candidates"] for r in counts},
    }
    _write_text(out / "run_summary.json", _json(summary) + "\n")
    print(format_table(counts, ["method", "candidates"]))
    if pipe.counters:
        print("counters: " + ", ".join(f"{k}={v}" for k, v in sorted(pipe.counters.items())))
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_rankings(path: Path, window_length: int) -> list[TrendCandidate]:
    return [
        TrendCandidate(
            r["query"], r["window_start"], window_length, r["score"],
            r["search_volume"], tuple(r["supporting_posts"]), r["source"],
        )
        for r in read_jsonl(path)
    ]


def evaluate_method(
    candidates: Sequence[TrendCandidate],
    trends: Sequence[PlantedTrend],
    window_length: int,
    k_list: Sequence[int],
    day_length: int,
) -> list[dict]:
    """Precision@k and head/tail detection per k, over days that contain trends.

    Window rankings are merged per day (each query keeps its best window).
    A trend counts as detected on a day it is active if it appears in that
    day's merged top-k.
    """
    by_day: dict[int, list[TrendCandidate]] = defaultdict(list)
    for c in candidates:
        by_day[c.window_start // day_length].append(c)
    active: dict[int, dict[str, str]] = defaultdict(dict)
    for t in trends:
        for w in t.active_windows:
            active[(w * window_length) // day_length][t.query] = t.kind
    rows = []
    for k in k_list:
        precisions = []
        found = {"head": [0, 0], "tail": [0, 0]}
        for day in sorted(active):
            merged = merge_rankings(by_day.get(day, ()))
            labels = active[day]
            precisions.append(precision_at_k(merged, set(labels), k))
            top = {c.query for c in merged[:k]}
            for q, kind in labels.items():
                found[kind][0] += q in top
                found[kind][1] += 1
        rows.append({
            "k": k,
            "precision": sum(precisions) / len(precisions) if precisions else 0.0,
            "head_detection": found["head"][0] / found["head"][1] if found["head"][1] else 0.0,
            "tail_detection": found["tail"][0] / found["tail"][1] if found["tail"][1] else 0.0,
            "days": len(precisions),
        })
    return rows


def _recall_samples(events: Path, generations: Path) -> list[RecallSample]:
    gens = {r["post_id"]: r["queries"] for r in read_jsonl(generations)}
    samples = []
    for rec in read_jsonl(events / "posts.jsonl"):
        post = from_record(Post, rec)
        if post.ground_truth_queries:
            samples.append(RecallSample(post.post_id, tuple(gens.get(post.post_id, ())), post.ground_truth_queries))
    return samples


def cmd_eval(cfg: RunConfig, rankings: Path, truth_dir: Path, out: Path, k_list: Sequence[int]) -> int:
    truth_path = truth_dir / "truth.jsonl"
    if not truth_path.is_file():
        raise UsageError(f"truth file not found: {truth_path}")
    trends = read_truth(truth_path)
    first = next(read_jsonl(truth_path), {})
    truth_window = first.get("window_length", cfg.pipeline.window_length)
    out.mkdir(parents=True, exist_ok=True)

    report: list[dict] = []
    table: list[dict] = []
    for method in cfg.methods:
        path = rankings / f"rankings_{method.value}.jsonl"
        if not path.is_file():
            report.append({"method": method.value, "status": "absent"})
            table.append({"method": method.value, "k": "-", "precision": "absent"})
            continue
        cands = _load_rankings(path, cfg.pipeline.window_length)
        for row in evaluate_method(cands, trends, truth_window, k_list, cfg.eval.day_length):
            report.append({"method": method.value, "status": "ok", **row})
            table.append({"method": method.value, **row})

    recall_line = None
    gen_path = rankings / "generations.jsonl"
    if gen_path.is_file() and (truth_dir / "posts.jsonl").is_file():
        samples = _recall_samples(truth_dir, gen_path)
        if samples:
            value = recall_at_k(samples, cfg.eval.recall_k)
            report.append({
                "metric": f"recall@{cfg.eval.recall_k}",
                "generator": cfg.generator.kind,
                "value": value,
                "samples": len(samples),
            })
            recall_line = f"recall@{cfg.eval.recall_k} ({cfg.generator.kind}, {len(samples)} posts): {value:.4f}"

    write_jsonl(out / "report.jsonl", report)
    text = format_table(table, ["method", "k", "precision", "head_detection", "tail_detection", "days"])
    if recall_line:
        text += "\n\n" + recall_line
    _write_text(out / "report.txt", text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(
    cfg: RunConfig,
    out: Path,
    pairs_path: Optional[Path] = None,
    policy_path: Optional[Path] = None,
    events: Optional[Path] = None,
    generations: Optional[Path] = None,
    monitor: bool = False,
) -> int:
    if monitor:
        if events is None or generations is None:
            raise UsageError("monitor mode needs --events and --generations")
        current = recall_at_k(_recall_samples(events, generations), cfg.trigger.k)
        print(f"recall@{cfg.trigger.k} = {current:.4f} (baseline {cfg.trigger.baseline_recall:.4f})")
        if not should_retrain(current, cfg.trigger):
            print("no retraining needed")
            return 0
        print("recall dropped past the threshold; retraining")

    if pairs_path is not None:
        pool = PairPool.load(pairs_path)
        theta0 = TabularPolicy.load(policy_path) if policy_path else TabularPolicy.uniform(pool.contexts, pool.vocabulary)
    else:
        gens = {r["post_id"]: r["queries"] for r in read_jsonl(generations)}
        posts = [p for p in (from_record(Post, r) for r in read_jsonl(events / "posts.jsonl")) if p.ground_truth_queries]
        posts = [p for p in posts if p.post_id in gens]
        pool = build_pairs(posts, gens, k=cfg.trigger.k)
        theta0 = policy_from_generations(pool, gens)

    result = train(theta0, theta0.copy(), pool, cfg.dpo, cfg.train_steps)
    out.mkdir(parents=True, exist_ok=True)
    result.policy.save(out / "policy.json")
    pool.save(out / "pairs.jsonl")
    _write_text(out / "metrics.csv", result.metrics_csv())

    report = squeeze_diagnostic(theta0, result.policy)
    off_ctx = sorted({p.context for p in pool.off_policy})
    squeeze = {
        "off_fraction": cfg.dpo.off_fraction,
        "steps": cfg.train_steps,
        "all_contexts": report.summary(),
        "off_policy_contexts": squeeze_diagnostic(theta0, result.policy, off_ctx).summary() if off_ctx else None,
        "win_rate": {
            kind.value: win_rate(result.policy, pairs) if pairs else None
            for kind, pairs in ((PolicyKind.ON_POLICY, pool.on_policy), (PolicyKind.OFF_POLICY, pool.off_policy))
        },
        "contexts": report.rows(),
    }
    _write_text(out / "squeeze.json", _json(squeeze) + "\n")
    last = result.metrics[-1]
    print(format_table(
        [{
            "pairs_on": len(pool.on_policy),
            "pairs_off": len(pool.off_policy),
            "final_loss": last.loss,
            "entropy_before": report.mean_entropy_before,
            "entropy_after": report.mean_entropy_after,
        }],
        ["pairs_on", "pairs_off", "final_loss", "entropy_before", "entropy_after"],
    ))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rttp", description="Trending-query pipeline experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. dpo.off_fraction=1.0")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="generate a synthetic world")
    common(p, config_required=True)

    p = sub.add_parser("run", help="run the pipeline over event streams")
    common(p)
    p.add_argument("--events", required=True, help="directory with the stream JSONL files")

    p = sub.add_parser("eval", help="score rankings against planted trends")
    common(p)
    p.add_argument("--rankings", required=True, help="output directory of `rttp run`")
    p.add_argument("--truth", required=True, help="directory with truth.jsonl and posts.jsonl")
    p.add_argument("--k", help="comma-separated k list, e.g. 50,100,500")

    p = sub.add_parser("train", help="train the tabular policy with mixed-batch DPO")
    common(p)
    p.add_argument("--pairs", help="pair pool JSONL (alternative to raw logs)")
    p.add_argument("--policy", help="initial policy JSON for --pairs (default: uniform)")
    p.add_argument("--events", help="directory with posts.jsonl (raw logs)")
    p.add_argument("--generations", help="generations.jsonl from `rttp run`")
    p.add_argument("--monitor", action="store_true", help="train only if the recall trigger fires")
    return parser


def _parse_k(text: Optional[str], default: Sequence[int]) -> tuple[int, ...]:
    if text is None:
        return tuple(default)
    try:
        ks = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise UsageError(f"bad --k list: {text!r}") from exc
    if not ks or min(ks) < 1:
        raise UsageError("--k values must be positive integers")
    return ks


def _dispatch(args) -> int:
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out)
    if args.command == "simulate":
        return cmd_simulate(cfg, out)
    if args.command == "run":
        return cmd_run(cfg, _require_dir(args.events, "--events"), out)
    if args.command == "eval":
        k_list = _parse_k(args.k, cfg.eval.k_list)
        return cmd_eval(cfg, _require_dir(args.rankings, "--rankings"), _require_dir(args.truth, "--truth"), out, k_list)
    if args.command == "train":
        pairs = Path(args.pairs) if args.pairs else None
        policy = Path(args.policy) if args.policy else None
        events = _require_dir(args.events, "--events") if args.events else None
        gens = Path(args.generations) if args.generations else None
        for path, flag in ((pairs, "--pairs"), (policy, "--policy"), (gens, "--generations")):
            if path is not None and not path.is_file():
                raise UsageError(f"{flag} file not found: {path}")
        if pairs is None and (events is None or gens is None):
            raise UsageError("train needs --pairs or both --events and --generations")
        if events is not None and not (events / "posts.jsonl").is_file():
            raise UsageError(f"posts file not found: {events / 'posts.jsonl'}")
        if args.monitor and cfg.trigger.baseline_recall <= 0:
            raise ConfigError("monitor mode needs trigger.baseline_recall > 0")
        return cmd_train(cfg, out, pairs, policy, events, gens, args.monitor)
    raise UsageError(f"unknown command {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
