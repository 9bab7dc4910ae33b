import math

import mpmath
import numpy as np
import pytest

from rttp.domain import Post
from rttp.mixdpo import (
    DpoConfig,
    PairPool,
    PolicyKind,
    PreferencePair,
    TabularPolicy,
    batch_loss,
    build_pairs,
    dpo_grad,
    dpo_loss,
    policy_from_generations,
    sample_mixed_batch,
    squeeze_diagnostic,
    train,
    win_rate,
)

ON, OFF = PolicyKind.ON_POLICY, PolicyKind.OFF_POLICY


def post(pid, gts):
    return Post(pid, "c", "t", "", 1, frozenset(gts))


def named(pool, pairs):
    return [(pool.vocabulary[p.win], pool.vocabulary[p.lose], p.policy_kind) for p in pairs]


def random_setup(rng, n_ctx=4, n_vocab=6, n_pairs=5, scale=2.0):
    ctx = [f"x{i}" for i in range(n_ctx)]
    vocab = [f"v{i}" for i in range(n_vocab)]
    theta = TabularPolicy(ctx, vocab, rng.normal(0, scale, (n_ctx, n_vocab)))
    ref = TabularPolicy(ctx, vocab, rng.normal(0, scale, (n_ctx, n_vocab)))
    pairs = []
    for _ in range(n_pairs):
        w, l = rng.choice(n_vocab, 2, replace=False)
        pairs.append(PreferencePair(ctx[int(rng.integers(n_ctx))], int(w), int(l), ON))
    return theta, ref, pairs


# -- pair construction ------------------------------------------------------


def test_build_pairs_on_policy():
    pool = build_pairs([post("p", {"minecraft"})], {"p": ["minecraft", "mounts of mayhem", "game"]})
    assert named(pool, pool.pairs) == [("minecraft", "mounts of mayhem", ON), ("minecraft", "game", ON)]


def test_build_pairs_off_policy():
    pool = build_pairs([post("p", {"minecraft"})], {"p": ["mounts of mayhem", "mobs"]})
    assert named(pool, pool.pairs) == [("minecraft", "mounts of mayhem", OFF)]


def test_build_pairs_match_without_negative():
    pool = build_pairs([post("p", {"a"})], {"p": ["a"]})
    assert len(pool) == 0


def test_build_pairs_skips_empty_generations():
    pool = build_pairs([post("p", {"a"})], {"p": []})
    assert len(pool) == 0 and pool.skipped == 1


def test_build_pairs_uses_best_ranked_match_and_normalizes():
    # "b" is also ground truth, so it is never used as a negative
    pool = build_pairs([post("p", {"b", "c"})], {"p": ["A", "C!", "B", "d"]}, k=3)
    assert named(pool, pool.pairs) == [("c", "a", ON)]


def test_pair_pool_round_trip(tmp_path):
    pool = build_pairs(
        [post("p", {"minecraft"}), post("q", {"z"})],
        {"p": ["minecraft", "x", "y"], "q": ["x"]},
    )
    pool.save(tmp_path / "pairs.jsonl")
    back = PairPool.load(tmp_path / "pairs.jsonl")
    assert back == pool


def test_policy_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    theta, _, _ = random_setup(rng)
    theta.save(tmp_path / "p.json")
    back = TabularPolicy.load(tmp_path / "p.json")
    assert back.contexts == theta.contexts and back.vocabulary == theta.vocabulary
    np.testing.assert_array_equal(back.logits, theta.logits)


def test_policy_from_generations_reproduces_order():
    gens = {"p": ["a", "b", "c"]}
    pool = build_pairs([post("p", {"z"})], gens)
    pol = policy_from_generations(pool, gens)
    assert pol.top("p", 3) == ["a", "b", "c"]


# -- loss and gradient ------------------------------------------------------


def test_loss_identity_at_reference():
    rng = np.random.default_rng(1)
    for _ in range(100):
        theta, _, pairs = random_setup(rng, n_pairs=1)
        assert abs(dpo_loss(theta, theta.copy(), pairs[0], float(rng.uniform(0.01, 5))) - math.log(2)) <= 1e-12


def test_loss_hand_example():
    theta = TabularPolicy(["x"], ["a", "b"], np.array([[1.0, 0.0]]))
    ref = TabularPolicy.uniform(["x"], ["a", "b"])
    value = dpo_loss(theta, ref, PreferencePair("x", 0, 1, ON), 0.1)
    with mpmath.workdps(40):
        oracle = -mpmath.log(1 / (1 + mpmath.exp(-mpmath.mpf("0.1"))))
    assert value == pytest.approx(float(oracle), rel=1e-14)
    assert value == pytest.approx(0.644397, abs=5e-7)


def test_loss_beta_to_zero():
    rng = np.random.default_rng(2)
    theta, ref, pairs = random_setup(rng, n_pairs=1)
    assert dpo_loss(theta, ref, pairs[0], 1e-12) == pytest.approx(math.log(2), abs=1e-10)


def test_loss_shift_invariance():
    rng = np.random.default_rng(3)
    for _ in range(50):
        theta, ref, pairs = random_setup(rng, n_pairs=1)
        base = dpo_loss(theta, ref, pairs[0], 0.5)
        t2, r2 = theta.copy(), ref.copy()
        # powers of two keep the shift exact in floating point
        t2.logits[int(rng.integers(t2.logits.shape[0]))] += 8.0
        r2.logits[int(rng.integers(r2.logits.shape[0]))] -= 4.0
        assert dpo_loss(t2, r2, pairs[0], 0.5) == pytest.approx(base, rel=1e-13, abs=1e-15)


def central_difference(theta, ref, batch, beta, h=1e-5):
    grad = np.zeros_like(theta.logits)
    for idx in np.ndindex(theta.logits.shape):
        plus, minus = theta.copy(), theta.copy()
        plus.logits[idx] += h
        minus.logits[idx] -= h
        grad[idx] = (batch_loss(plus, ref, batch, beta) - batch_loss(minus, ref, batch, beta)) / (2 * h)
    return grad


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(30):
        theta, ref, pairs = random_setup(rng, n_pairs=int(rng.integers(1, 6)))
        beta = float(rng.uniform(0.05, 2.0))
        g = dpo_grad(theta, ref, pairs, beta)
        fd = central_difference(theta, ref, pairs, beta)
        rel = np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)
        assert rel <= 1e-6


def test_gradient_duplicate_pair_and_zero_beta():
    rng = np.random.default_rng(5)
    theta, ref, pairs = random_setup(rng, n_pairs=1)
    np.testing.assert_allclose(dpo_grad(theta, ref, pairs * 2, 0.3), dpo_grad(theta, ref, pairs, 0.3), rtol=0, atol=1e-15)
    assert not np.any(dpo_grad(theta, ref, pairs, 0.0))
    with pytest.raises(ValueError, match="empty batch"):
        dpo_grad(theta, ref, [], 0.1)


# -- sampling and training --------------------------------------------------


def mixed_pool():
    ctx = ["a", "b", "c"]
    vocab = ["v0", "v1", "v2", "v3"]
    on = [PreferencePair("a", 0, 1, ON), PreferencePair("a", 0, 2, ON)]
    off = [PreferencePair("b", 3, 0, OFF)]
    return PairPool(ctx, vocab, on, off)


@pytest.mark.parametrize("rho, expected", [(0.0, 0.0), (1.0, 1.0)])
def test_sampling_boundaries(rho, expected):
    rng = np.random.default_rng(0)
    batch = sample_mixed_batch(mixed_pool(), DpoConfig(off_fraction=rho), rng, size=1000)
    assert np.mean([p.policy_kind is OFF for p in batch]) == expected


def test_sampling_ratio():
    rng = np.random.default_rng(0)
    batch = sample_mixed_batch(mixed_pool(), DpoConfig(off_fraction=0.1), rng, size=100_000)
    frac = np.mean([p.policy_kind is OFF for p in batch])
    assert 0.097 <= frac <= 0.103


def test_sampling_errors():
    empty = PairPool(["a"], ["v0", "v1"])
    with pytest.raises(ValueError, match="no training data"):
        sample_mixed_batch(empty, DpoConfig(), np.random.default_rng(0))


def test_train_rejects_zero_steps():
    pool = mixed_pool()
    theta = TabularPolicy.uniform(pool.contexts, pool.vocabulary)
    with pytest.raises(ValueError):
        train(theta, theta.copy(), pool, DpoConfig(), 0)


def test_single_pair_margin_increases():
    pool = PairPool(["a"], ["v0", "v1", "v2"], [PreferencePair("a", 0, 1, ON)])
    theta = TabularPolicy.uniform(pool.contexts, pool.vocabulary)
    result = train(theta, theta.copy(), pool, DpoConfig(off_fraction=0.0, learning_rate=0.5, batch_size=1), 60)
    margins = [m.margin for m in result.metrics[:50]]
    assert all(b > a for a, b in zip(margins, margins[1:]))


def test_first_step_lowers_loss():
    pool = mixed_pool()
    theta = TabularPolicy.uniform(pool.contexts, pool.vocabulary)
    result = train(theta, theta.copy(), pool, DpoConfig(beta=0.1), 1)
    assert result.metrics[0].loss < math.log(2)


def test_training_deterministic():
    pool = mixed_pool()
    theta = TabularPolicy.uniform(pool.contexts, pool.vocabulary)
    a = train(theta, theta.copy(), pool, DpoConfig(seed=3), 20)
    b = train(theta, theta.copy(), pool, DpoConfig(seed=3), 20)
    assert a.metrics_csv() == b.metrics_csv()
    np.testing.assert_array_equal(a.policy.logits, b.policy.logits)


def test_on_policy_only_training_leaves_other_rows():
    pool = mixed_pool()
    rng = np.random.default_rng(8)
    theta = TabularPolicy(pool.contexts, pool.vocabulary, rng.normal(size=(3, 4)))
    result = train(theta, theta.copy(), pool, DpoConfig(off_fraction=0.0, learning_rate=2.0), 50)
    touched = {pool.contexts.index(p.context) for p in pool.on_policy}
    for row in range(3):
        same = np.array_equal(result.policy.logits[row], theta.logits[row])
        assert same == (row not in touched)


def test_win_rate_and_training_effect():
    pool = mixed_pool()
    theta = TabularPolicy.uniform(pool.contexts, pool.vocabulary)
    assert win_rate(theta, pool.pairs) == 0.0
    result = train(theta, theta.copy(), pool, DpoConfig(off_fraction=0.5, learning_rate=5.0), 100)
    assert win_rate(result.policy, pool.pairs) == 1.0


# -- squeezing diagnostic ---------------------------------------------------


def test_squeeze_identity_and_uniform():
    pol = TabularPolicy.uniform(["a"], ["w", "x", "y", "z"])
    rep = squeeze_diagnostic(pol, pol.copy())
    assert rep.mean_entropy_change == 0.0
    assert rep.mean_entropy_before == pytest.approx(math.log(4), rel=1e-15)
    assert rep.mean_tail_mass_before == pytest.approx(0.75)


def test_squeeze_subset_of_contexts():
    rng = np.random.default_rng(1)
    theta, ref, _ = random_setup(rng)
    rep = squeeze_diagnostic(theta, ref, ["x1", "x3"])
    full = squeeze_diagnostic(theta, ref)
    np.testing.assert_array_equal(rep.entropy_after, full.entropy_after[[1, 3]])


def test_train_matches_naive_loop():
    rng = np.random.default_rng(12)
    ctx = [f"x{i}" for i in range(6)]
    vocab = [f"v{i}" for i in range(5)]
    on = [PreferencePair(ctx[i % 4], i % 5, (i + 1) % 5, ON) for i in range(9)]
    off = [PreferencePair(ctx[4 + i % 2], (i + 2) % 5, i % 5, OFF) for i in range(3)]
    pool = PairPool(ctx, vocab, on, off)
    theta = TabularPolicy(ctx, vocab, rng.normal(size=(6, 5)))
    cfg = DpoConfig(off_fraction=0.3, learning_rate=0.7, batch_size=8, seed=4)
    result = train(theta, theta.copy(), pool, cfg, 40)

    naive = theta.copy()
    sampler = np.random.default_rng(cfg.seed)
    for _ in range(40):
        batch = sample_mixed_batch(pool, cfg, sampler)
        naive.logits -= cfg.learning_rate * dpo_grad(naive, theta, batch, cfg.beta)
    np.testing.assert_allclose(result.policy.logits, naive.logits, rtol=1e-12, atol=1e-12)
