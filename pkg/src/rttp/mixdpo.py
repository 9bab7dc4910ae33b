"""Mix-policy DPO over a tabular softmax policy.

The policy is a logits matrix with one row per context (prompt) and one column
per vocabulary entry (candidate query), so the pairwise DPO loss and its
gradient can be evaluated exactly.

Pairs come in two pools. On-policy pairs rank a correct generation above the
model's other generations; off-policy pairs rank an unseen ground-truth query
above the model's top-1 miss. Training batches draw each slot from the
off-policy pool with probability ``off_fraction``.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .domain import Post, normalize_query

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class PolicyKind(str, enum.Enum):
    ON_POLICY = "on_policy"
    OFF_POLICY = "off_policy"


@dataclass
class TabularPolicy:
    contexts: list[str]
    vocabulary: list[str]
    logits: np.ndarray

    def __post_init__(self):
        self.contexts = list(self.contexts)
        self.vocabulary = list(self.vocabulary)
        self.logits = np.array(self.logits, dtype=float)
        if not self.vocabulary:
            raise ValueError("vocabulary must be non-empty")
        if self.logits.shape != (len(self.contexts), len(self.vocabulary)):
            raise ValueError(
                f"logits shape {self.logits.shape} does not match "
                f"{len(self.contexts)} contexts x {len(self.vocabulary)} vocab"
            )
        self.context_index = {c: i for i, c in enumerate(self.contexts)}
        self.vocab_index = {v: i for i, v in enumerate(self.vocabulary)}

    @classmethod
    def uniform(cls, contexts: Sequence[str], vocabulary: Sequence[str]) -> "TabularPolicy":
        return cls(contexts, vocabulary, np.zeros((len(contexts), len(vocabulary))))

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.contexts, self.vocabulary, self.logits.copy())

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def entropy(self) -> np.ndarray:
        """Shannon entropy (nats) of every row."""
        lp = self.log_probs()
        return -(np.exp(lp) * lp).sum(axis=1)

    def top(self, context: str, k: int) -> list[str]:
        row = self.logits[self.context_index[context]]
        order = sorted(range(len(row)), key=lambda j: (-row[j], self.vocabulary[j]))
        return [self.vocabulary[j] for j in order[:k]]

    def same_shape(self, other: "TabularPolicy") -> bool:
        return self.contexts == other.contexts and self.vocabulary == other.vocabulary

    def save(self, path: str | Path) -> None:
        doc = {
            "format": "rttp-tabular-policy",
            "version": FORMAT_VERSION,
            "contexts": self.contexts,
            "vocabulary": self.vocabulary,
            "logits": self.logits.tolist(),
        }
        Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TabularPolicy":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        _check_header(doc, "rttp-tabular-policy")
        return cls(doc["contexts"], doc["vocabulary"], np.array(doc["logits"], dtype=float))


def _check_header(doc: Mapping, fmt: str) -> None:
    if doc.get("format") != fmt or doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"expected {fmt} v{FORMAT_VERSION}, got {doc.get('format')} v{doc.get('version')}")


@dataclass(frozen=True)
class PreferencePair:
    context: str
    win: int
    lose: int
    policy_kind: PolicyKind

    def __post_init__(self):
        object.__setattr__(self, "policy_kind", PolicyKind(self.policy_kind))
        if self.win == self.lose:
            raise ValueError("win and lose must differ")
        if self.win < 0 or self.lose < 0:
            raise ValueError("vocab indices must be >= 0")


@dataclass
class PairPool:
    contexts: list[str]
    vocabulary: list[str]
    on_policy: list[PreferencePair] = field(default_factory=list)
    off_policy: list[PreferencePair] = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        ctx = set(self.contexts)
        n = len(self.vocabulary)
        for kind, pairs in ((PolicyKind.ON_POLICY, self.on_policy), (PolicyKind.OFF_POLICY, self.off_policy)):
            for p in pairs:
                if p.policy_kind is not kind:
                    raise ValueError(f"{p.policy_kind.value} pair in {kind.value} pool")
                if p.context not in ctx or p.win >= n or p.lose >= n:
                    raise ValueError(f"pair references unknown context or vocab entry: {p}")

    def __len__(self) -> int:
        return len(self.on_policy) + len(self.off_policy)

    @property
    def pairs(self) -> list[PreferencePair]:
        return self.on_policy + self.off_policy

    def save(self, path: str | Path) -> None:
        header = {
            "format": "rttp-pair-pool",
            "version": FORMAT_VERSION,
            "contexts": self.contexts,
            "vocabulary": self.vocabulary,
            "skipped": self.skipped,
        }
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header) + "\n")
            for p in self.pairs:
                row = {"context": p.context, "win": p.win, "lose": p.lose, "policy_kind": p.policy_kind.value}
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PairPool":
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines:
            raise ValueError(f"empty pair file: {path}")
        header, rows = lines[0], lines[1:]
        _check_header(header, "rttp-pair-pool")
        pairs = [PreferencePair(**r) for r in rows]
        return cls(
            header["contexts"],
            header["vocabulary"],
            [p for p in pairs if p.policy_kind is PolicyKind.ON_POLICY],
            [p for p in pairs if p.policy_kind is PolicyKind.OFF_POLICY],
            header.get("skipped", 0),
        )


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    off_fraction: float = 0.1
    learning_rate: float = 1.0
    batch_size: int = 32
    seed: int = 0
    refresh_reference: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if not 0.0 <= self.off_fraction <= 1.0:
            raise ValueError("off_fraction must be in [0, 1]")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------


def build_pairs(
    posts: Iterable[Post],
    generations: Mapping[str, Sequence[str]],
    k: int = 3,
    context_of: Optional[Mapping[str, str]] = None,
    vocabulary: Sequence[str] = (),
) -> PairPool:
    """Turn posts with ground truth plus ranked generations into a pair pool.

    A post whose top-``k`` generations contain a ground-truth query yields
    on-policy pairs: the best-ranked match beats every non-matching generation
    in the top ``k``. Otherwise each ground-truth query beats the top-1
    generation (off-policy). ``context_of`` maps post ids to shared context ids;
    by default each post is its own context. ``vocabulary`` pre-seeds the
    vocabulary so indices line up with an existing policy.
    """
    contexts: list[str] = []
    vocab: list[str] = list(vocabulary)
    vidx: dict[str, int] = {v: i for i, v in enumerate(vocab)}

    def vid(text: str) -> int:
        if text not in vidx:
            vidx[text] = len(vocab)
            vocab.append(text)
        return vidx[text]

    on: list[PreferencePair] = []
    off: list[PreferencePair] = []
    skipped = 0
    seen_ctx: set[str] = set()
    for post in posts:
        gts = sorted(post.ground_truth_queries)
        if not gts:
            raise ValueError(f"post {post.post_id} has no ground-truth queries")
        if post.post_id not in generations:
            raise ValueError(f"no generations for post {post.post_id}")
        gens: list[str] = []
        for g in generations[post.post_id]:
            g = normalize_query(g)
            if g and g not in gens:
                gens.append(g)
        ctx = context_of[post.post_id] if context_of else post.post_id
        if ctx not in seen_ctx:
            seen_ctx.add(ctx)
            contexts.append(ctx)
        for g in gens:
            vid(g)
        top = gens[:k]
        gt_set = set(gts)
        matches = [g for g in top if g in gt_set]
        if matches:
            win = vid(matches[0])
            for g in top:
                if g not in gt_set:
                    on.append(PreferencePair(ctx, win, vid(g), PolicyKind.ON_POLICY))
        elif gens:
            lose = vid(gens[0])
            for g in gts:
                off.append(PreferencePair(ctx, vid(g), lose, PolicyKind.OFF_POLICY))
        else:
            skipped += 1
            for g in gts:
                vid(g)
    if skipped:
        log.warning("skipped %d posts with no generations", skipped)
    return PairPool(contexts, vocab, on, off, skipped)


def policy_from_generations(
    pool: PairPool,
    generations: Mapping[str, Sequence[str]],
    context_of: Optional[Mapping[str, str]] = None,
    scale: float = 1.0,
) -> TabularPolicy:
    """Initial policy whose row ordering reproduces each context's generations.

    The rank-r generation among n gets logit ``scale * (n - r + 1)``; everything
    else stays at 0.
    """
    policy = TabularPolicy.uniform(pool.contexts, pool.vocabulary)
    for post_id, gens in generations.items():
        ctx = context_of[post_id] if context_of else post_id
        if ctx not in policy.context_index:
            continue
        row = policy.context_index[ctx]
        texts = [g for g in (normalize_query(x) for x in gens) if g in policy.vocab_index]
        n = len(texts)
        for r, g in enumerate(texts, start=1):
            j = policy.vocab_index[g]
            policy.logits[row, j] = max(policy.logits[row, j], scale * (n - r + 1))
    return policy


# ---------------------------------------------------------------------------
# Loss and gradient
# ---------------------------------------------------------------------------


def _check_compatible(theta: TabularPolicy, ref: TabularPolicy) -> None:
    if not theta.same_shape(ref):
        raise ValueError("policy and reference must share contexts and vocabulary")


def _pair_arrays(policy: TabularPolicy, pairs: Sequence[PreferencePair]):
    rows = np.fromiter((policy.context_index[p.context] for p in pairs), dtype=np.intp, count=len(pairs))
    win = np.fromiter((p.win for p in pairs), dtype=np.intp, count=len(pairs))
    lose = np.fromiter((p.lose for p in pairs), dtype=np.intp, count=len(pairs))
    return rows, win, lose


def _margins(theta_lp, ref_lp, rows, win, lose) -> np.ndarray:
    """Inner bracket of the DPO objective for each pair (log-ratio difference)."""
    return (theta_lp[rows, win] - ref_lp[rows, win]) - (theta_lp[rows, lose] - ref_lp[rows, lose])


def dpo_loss(theta: TabularPolicy, ref: TabularPolicy, pair: PreferencePair, beta: float) -> float:
    """-log sigmoid(beta * [log-ratio(win) - log-ratio(lose)])."""
    _check_compatible(theta, ref)
    r = theta.context_index[pair.context]
    lp = log_softmax(theta.logits[r])
    lr = log_softmax(ref.logits[r])
    delta = (lp[pair.win] - lr[pair.win]) - (lp[pair.lose] - lr[pair.lose])
    return float(np.logaddexp(0.0, -beta * delta))


def batch_loss(theta: TabularPolicy, ref: TabularPolicy, batch: Sequence[PreferencePair], beta: float) -> float:
    if not batch:
        raise ValueError("empty batch")
    rows, win, lose = _pair_arrays(theta, batch)
    d = _margins(theta.log_probs(), ref.log_probs(), rows, win, lose)
    return float(np.logaddexp(0.0, -beta * d).mean())


def _grad_arrays(theta_lp, ref_lp, rows, win, lose, beta, shape) -> np.ndarray:
    s = expit(-beta * _margins(theta_lp, ref_lp, rows, win, lose))
    coef = beta * s / len(rows)
    # d/dz [log pi(win) - log pi(lose)] = onehot(win) - onehot(lose); the
    # softmax terms of the two log-probabilities cancel.
    grad = np.zeros(shape)
    np.add.at(grad, (rows, win), -coef)
    np.add.at(grad, (rows, lose), coef)
    return grad


def dpo_grad(theta: TabularPolicy, ref: TabularPolicy, batch: Sequence[PreferencePair], beta: float) -> np.ndarray:
    """Gradient of the mean batch loss with respect to ``theta.logits``."""
    _check_compatible(theta, ref)
    if not batch:
        raise ValueError("empty batch")
    rows, win, lose = _pair_arrays(theta, batch)
    return _grad_arrays(theta.log_probs(), ref.log_probs(), rows, win, lose, beta, theta.logits.shape)


# ---------------------------------------------------------------------------
# Sampling and training
# ---------------------------------------------------------------------------


def _sample_indices(n_on: int, n_off: int, off_fraction: float, size: int, rng: np.random.Generator, warn: bool = True):
    """(is_off mask, index within the chosen pool) for ``size`` slots."""
    if n_on == 0 and n_off == 0:
        raise ValueError("no training data")
    if n_on == 0 or n_off == 0:
        if warn:
            log.warning("only one non-empty pair pool; sampling from it alone")
        off_fraction = 1.0 if n_on == 0 else 0.0
    is_off = rng.random(size) < off_fraction
    idx = np.where(
        is_off,
        rng.integers(0, max(n_off, 1), size=size),
        rng.integers(0, max(n_on, 1), size=size),
    )
    return is_off, idx


def _gather(on_values: np.ndarray, off_values: np.ndarray, is_off: np.ndarray, idx: np.ndarray) -> np.ndarray:
    out = np.empty(len(idx), dtype=np.intp)
    out[is_off] = off_values[idx[is_off]]
    out[~is_off] = on_values[idx[~is_off]]
    return out


def sample_mixed_batch(pool: PairPool, cfg: DpoConfig, rng: np.random.Generator, size: Optional[int] = None) -> list[PreferencePair]:
    """Each slot is off-policy with probability ``cfg.off_fraction``, then drawn
    uniformly (with replacement) from the chosen pool."""
    size = cfg.batch_size if size is None else size
    is_off, idx = _sample_indices(len(pool.on_policy), len(pool.off_policy), cfg.off_fraction, size, rng)
    return [pool.off_policy[i] if o else pool.on_policy[i] for o, i in zip(is_off, idx)]


@dataclass
class TrainStep:
    step: int
    loss: float
    margin: float
    mean_entropy: float
    off_fraction: float


@dataclass
class TrainResult:
    policy: TabularPolicy
    metrics: list[TrainStep]
    entropy_history: np.ndarray  # steps x contexts

    def metrics_csv(self) -> str:
        lines = ["step,loss,margin,mean_entropy,off_fraction"]
        for m in self.metrics:
            lines.append(f"{m.step},{m.loss!r},{m.margin!r},{m.mean_entropy!r},{m.off_fraction!r}")
        return "\n".join(lines) + "\n"


def train(
    theta0: TabularPolicy,
    ref: TabularPolicy,
    pool: PairPool,
    cfg: DpoConfig,
    steps: int,
) -> TrainResult:
    """Plain gradient descent on mixed batches.

    Metrics after step t describe the updated policy: ``loss`` and ``margin``
    are the mixture-weighted means over both pools (log pi(win) - log pi(lose)
    for the margin), ``mean_entropy`` averages over all contexts, and
    ``off_fraction`` is the share of off-policy slots in that step's batch.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_compatible(theta0, ref)
    if theta0.vocabulary != pool.vocabulary or not set(pool.contexts) <= set(theta0.context_index):
        raise ValueError("pair pool does not match the policy")
    theta = theta0.copy()
    rng = np.random.default_rng(cfg.seed)
    ref_lp = ref.log_probs()
    on = _pair_arrays(theta, pool.on_policy)
    off = _pair_arrays(theta, pool.off_policy)
    n_on, n_off = len(pool.on_policy), len(pool.off_policy)
    if n_on == 0 and n_off == 0:
        raise ValueError("no training data")
    rho = cfg.off_fraction if n_on and n_off else (1.0 if n_off else 0.0)
    if rho != cfg.off_fraction:
        log.warning("only one non-empty pair pool; sampling from it alone")

    metrics: list[TrainStep] = []
    ent_hist = np.empty((steps, len(theta.contexts)))
    for t in range(steps):
        is_off, idx = _sample_indices(n_on, n_off, cfg.off_fraction, cfg.batch_size, rng, warn=False)
        rows, win, lose = (_gather(o, f, is_off, idx) for o, f in zip(on, off))
        grad = _grad_arrays(theta.log_probs(), ref_lp, rows, win, lose, cfg.beta, theta.logits.shape)
        theta.logits -= cfg.learning_rate * grad

        lp = theta.log_probs()
        loss = margin = 0.0
        for weight, (r, w, l) in ((1.0 - rho, on), (rho, off)):
            if weight == 0.0 or len(r) == 0:
                continue
            d = _margins(lp, ref_lp, r, w, l)
            loss += weight * float(np.logaddexp(0.0, -cfg.beta * d).mean())
            margin += weight * float((lp[r, w] - lp[r, l]).mean())
        ent = -(np.exp(lp) * lp).sum(axis=1)
        ent_hist[t] = ent
        metrics.append(TrainStep(t + 1, loss, margin, float(ent.mean()), float(is_off.mean())))
    return TrainResult(theta, metrics, ent_hist)


def win_rate(policy: TabularPolicy, pairs: Sequence[PreferencePair]) -> float:
    """Share of pairs where pi(win|x) > pi(lose|x)."""
    if not pairs:
        raise ValueError("no pairs")
    rows, win, lose = _pair_arrays(policy, pairs)
    return float((policy.logits[rows, win] > policy.logits[rows, lose]).mean())


# ---------------------------------------------------------------------------
# Squeezing diagnostic
# ---------------------------------------------------------------------------


@dataclass
class SqueezeReport:
    contexts: list[str]
    entropy_before: np.ndarray
    entropy_after: np.ndarray
    tail_mass_before: np.ndarray
    tail_mass_after: np.ndarray

    @property
    def mean_entropy_before(self) -> float:
        return float(self.entropy_before.mean())

    @property
    def mean_entropy_after(self) -> float:
        return float(self.entropy_after.mean())

    @property
    def mean_entropy_change(self) -> float:
        return float((self.entropy_after - self.entropy_before).mean())

    @property
    def mean_tail_mass_before(self) -> float:
        return float(self.tail_mass_before.mean())

    @property
    def mean_tail_mass_after(self) -> float:
        return float(self.tail_mass_after.mean())

    def summary(self) -> dict:
        return {
            "contexts": len(self.contexts),
            "mean_entropy_before": self.mean_entropy_before,
            "mean_entropy_after": self.mean_entropy_after,
            "mean_entropy_change": self.mean_entropy_change,
            "mean_tail_mass_before": self.mean_tail_mass_before,
            "mean_tail_mass_after": self.mean_tail_mass_after,
        }

    def rows(self) -> list[dict]:
        return [
            {
                "context": c,
                "entropy_before": float(self.entropy_before[i]),
                "entropy_after": float(self.entropy_after[i]),
                "tail_mass_before": float(self.tail_mass_before[i]),
                "tail_mass_after": float(self.tail_mass_after[i]),
            }
            for i, c in enumerate(self.contexts)
        ]


def squeeze_diagnostic(
    before: TabularPolicy,
    after: TabularPolicy,
    eval_contexts: Optional[Sequence[str]] = None,
) -> SqueezeReport:
    """Entropy and mass outside the top-1 entry, per context, before vs after."""
    if not before.same_shape(after):
        raise ValueError("policies must share contexts and vocabulary")
    ctx = list(before.contexts if eval_contexts is None else eval_contexts)
    rows = np.array([before.context_index[c] for c in ctx], dtype=np.intp)

    def stats(p: TabularPolicy):
        lp = p.log_probs()[rows]
        probs = np.exp(lp)
        return -(probs * lp).sum(axis=1), 1.0 - probs.max(axis=1)

    hb, tb = stats(before)
    ha, ta = stats(after)
    return SqueezeReport(ctx, hb, ha, tb, ta)
