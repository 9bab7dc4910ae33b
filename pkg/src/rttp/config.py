"""Run configuration: one YAML file per experiment, with dotted-key overrides.

Example::

    seed: 42
    world: {n_head_trends: 20, n_tail_trends: 20}
    generator: {kind: template}          # knowledge defaults to <events>/knowledge.jsonl
    weights: {reaction: 1.0, comment: 3.0, reshare: 2.0, click: 0.5}
    pipeline: {window_length: 3600, allowed_lateness: 300, history_len: 24,
               burst_threshold: 9.0, rate_floor: 0.5, volume_to_score: 1.0,
               include_organic_bursts: true, max_queries: 3, rank_k: 500}
    methods: [volume_only, volume_plus_generated, rttp_full]
    eval: {k_list: [50, 100, 500], recall_k: 3, day_length: 86400}
    dpo: {beta: 0.1, off_fraction: 0.1, learning_rate: 1.0, batch_size: 32, steps: 500}
    trigger: {k: 3, drop_threshold: 0.1, baseline_recall: 0.9, mode: relative}

Overrides use ``section.key=value`` with YAML-parsed values, e.g.
``--set dpo.off_fraction=1.0``. ``RTTP_GENERATOR_URL`` overrides the remote
generator URL.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .evaluation import TriggerConfig
from .mixdpo import DpoConfig
from .pipeline import MethodVariant, PipelineConfig
from .querygen import RemoteConfig
from .scoring import EngagementWeights
from .simgen import WorldConfig

ENV_GENERATOR_URL = "RTTP_GENERATOR_URL"
GENERATOR_KINDS = ("extractive", "template", "remote")


class ConfigError(Exception):
    """Bad or missing configuration; the CLI maps this to exit code 2."""


@dataclass(frozen=True)
class GeneratorSettings:
    kind: str = "template"
    knowledge: Optional[str] = None
    remote: Optional[RemoteConfig] = None
    seed: int = 0


@dataclass(frozen=True)
class EvalSettings:
    k_list: tuple[int, ...] = (50, 100, 500)
    recall_k: int = 3
    day_length: int = 86400


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    world: WorldConfig = field(default_factory=WorldConfig)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    methods: tuple[MethodVariant, ...] = tuple(MethodVariant)
    rank_k: int = 500
    eval: EvalSettings = field(default_factory=EvalSettings)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    train_steps: int = 500
    trigger: TriggerConfig = field(default_factory=lambda: TriggerConfig(baseline_recall=0.9))
    source: Optional[str] = None


def _set_dotted(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        nxt = node.setdefault(key, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot override {dotted}: {key} is not a section")
        node = nxt
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value: {text!r}")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value for {key}: {exc}") from exc


def _build(cls, section: Any, name: str, **extra):
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**{**section, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} settings: {exc}") from exc


def config_from_dict(doc: dict, source: Optional[str] = None) -> RunConfig:
    doc = dict(doc or {})
    top = {"seed", "world", "generator", "weights", "pipeline", "methods", "eval", "dpo", "trigger"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = int(doc.get("seed", 42))

    world_doc = dict(doc.get("world") or {})
    world_doc.setdefault("seed", seed)
    world = _build(WorldConfig, world_doc, "world")

    gen_doc = dict(doc.get("generator") or {})
    remote_doc = gen_doc.pop("remote", None)
    if os.environ.get(ENV_GENERATOR_URL):
        remote_doc = {**(remote_doc or {}), "url": os.environ[ENV_GENERATOR_URL]}
    remote = _build(RemoteConfig, remote_doc, "generator.remote") if remote_doc else None
    generator = _build(GeneratorSettings, gen_doc, "generator", remote=remote)
    if generator.kind not in GENERATOR_KINDS:
        raise ConfigError(f"generator.kind must be one of {GENERATOR_KINDS}, got {generator.kind!r}")
    if generator.kind == "remote" and remote is None:
        raise ConfigError(f"generator.kind=remote needs generator.remote.url (or ${ENV_GENERATOR_URL})")

    try:
        weights = EngagementWeights.from_mapping(doc["weights"]) if doc.get("weights") else EngagementWeights()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid 'weights': {exc}") from exc

    pipe_doc = dict(doc.get("pipeline") or {})
    rank_k = int(pipe_doc.pop("rank_k", 500))
    if rank_k < 1:
        raise ConfigError("pipeline.rank_k must be >= 1")
    pipeline = _build(PipelineConfig, pipe_doc, "pipeline", weights=weights)

    try:
        methods = tuple(MethodVariant(m) for m in doc.get("methods", [m.value for m in MethodVariant]))
    except ValueError as exc:
        raise ConfigError(f"invalid 'methods': {exc}") from exc
    if not methods:
        raise ConfigError("at least one method is required")

    eval_doc = dict(doc.get("eval") or {})
    if "k_list" in eval_doc:
        eval_doc["k_list"] = tuple(int(k) for k in eval_doc["k_list"])
    ev = _build(EvalSettings, eval_doc, "eval")
    if not ev.k_list or min(ev.k_list) < 1 or ev.recall_k < 1 or ev.day_length < 1:
        raise ConfigError("eval.k_list, eval.recall_k and eval.day_length must be positive")

    dpo_doc = dict(doc.get("dpo") or {})
    steps = int(dpo_doc.pop("steps", 500))
    if steps < 1:
        raise ConfigError("dpo.steps must be >= 1")
    dpo_doc.setdefault("seed", seed)
    dpo = _build(DpoConfig, dpo_doc, "dpo")

    trig_doc = dict(doc.get("trigger") or {})
    trig_doc.setdefault("baseline_recall", 0.9)
    trigger = _build(TriggerConfig, trig_doc, "trigger")

    return RunConfig(seed, world, generator, pipeline, methods, rank_k, ev, dpo, steps, trigger, source)


def load_config(path: Optional[str | os.PathLike], overrides: Sequence[str] = ()) -> RunConfig:
    """Read, override, and validate a config. ``path=None`` means all defaults."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {p}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {p} must be a mapping")
    for text in overrides:
        key, value = parse_override(text)
        _set_dotted(doc, key, value)
    return config_from_dict(doc, str(path) if path is not None else None)
