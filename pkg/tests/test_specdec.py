import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from specbeam.beam import BeamConfig, beam_search
from specbeam.core import CallLedger, ScoredBeam, make_rng, normalize
from specbeam.oracle import enumerate_joint
from specbeam.specdec import (DraftBundle, SDConfig, _TargetPass, _resample, accept_prob, accepts, baseline_decode,
                              draft, flatten, flatten_sequences, relaxed_step, sd_decode, simulated_time,
                              verify_relaxed, verify_strict)
from specbeam.toymodel import TabularModel

from conftest import random_model, set_logits, tiny_world, world_from_items


def test_sdconfig_validation():
    assert SDConfig().draft_mode == "deterministic"
    assert SDConfig(verification="relaxed").draft_mode == "sampled"
    for bad in (dict(K=5, N=4), dict(gamma=0), dict(verification="loose"), dict(cost_ratio=2.0)):
        with pytest.raises(ValueError):
            SDConfig(**bad)


# ---------------------------------------------------------------- drafting

def test_draft_single_step_top_n():
    w = world_from_items([(0, 0), (1, 0), (2, 0)])
    m = TabularModel(3, 2)
    set_logits(m, 0, (), {0: math.log(0.7), 1: math.log(0.2), 2: math.log(0.1)})
    b = draft(m, ScoredBeam.root(), SDConfig(gamma=1, N=2, K=1), w.trie())
    assert b.beams_per_step[0].seqs == [(0,), (1,)]


def test_draft_single_item_world():
    w = world_from_items([(2, 1, 0)])
    b = draft(TabularModel(3, 3), ScoredBeam.root(), SDConfig(gamma=3, N=3, K=1), w.trie())
    assert [x.seqs for x in b.beams_per_step] == [[(2,)], [(2, 1)], [(2, 1, 0)]]


def test_draft_three_steps_hand_enumerated():
    # tokens: depth 1 {0: .6, 1: .4}; under 0: {0: .5, 1: .5}; under 1: {0: .9, 1: .1}; depth 3 forced
    items = [(0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 0)]
    w = world_from_items(items)
    m = TabularModel(2, 3)
    set_logits(m, 0, (), {0: math.log(0.6), 1: math.log(0.4)})
    set_logits(m, 0, (1,), {0: math.log(0.9), 1: math.log(0.1)})
    b = draft(m, ScoredBeam.root(), SDConfig(gamma=3, N=3, K=1), w.trie())
    # joints at depth 2: (1,0) .36, (0,0) .3, (0,1) .3, (1,1) .04
    assert b.beams_per_step[1].seqs == [(1, 0), (0, 0), (0, 1)]
    assert b.beams_per_step[1].logprobs == pytest.approx([math.log(0.36), math.log(0.3), math.log(0.3)])
    assert b.beams_per_step[2].seqs == [(1, 0, 0), (0, 0, 0), (0, 1, 0)]


def test_draft_scores_start_from_origin_scores():
    w = world_from_items([(0, 0), (0, 1)])
    origin = ScoredBeam((((0,), -1.5),), 1)
    b = draft(TabularModel(2, 2), origin, SDConfig(gamma=1, N=2, K=1), w.trie())
    assert b.beams_per_step[0].logprobs == pytest.approx([-1.5 + math.log(0.5)] * 2)


def test_draft_past_length_rejected():
    w = world_from_items([(0, 0)])
    with pytest.raises(ValueError):
        draft(TabularModel(1, 2), ScoredBeam.root(), SDConfig(gamma=3, N=1, K=1), w.trie())


# ---------------------------------------------------------------- strict verification

def _strict_toy(target_top):
    """Origin {(0,)}; target picks ``target_top`` among children {1, 2, 3, 4} of (0,)."""
    items = [(0, c) for c in (1, 2, 3, 4)]
    w = world_from_items(items)
    target = TabularModel(5, 2)
    set_logits(target, 0, (0,), {c: (3.0 if c in target_top else 0.0) for c in (1, 2, 3, 4)})
    origin = ScoredBeam((((0,), 0.0),), 1)
    drafted = ScoredBeam((((0, 1), -1.0), ((0, 2), -1.1), ((0, 3), -1.2)), 2)
    return w, target, DraftBundle(origin, [drafted])


def test_verify_strict_accepts_subset():
    w, target, bundle = _strict_toy({1, 3})
    cfg = SDConfig(gamma=1, N=3, K=2)
    acc, out, verdicts = verify_strict(target, bundle, cfg, w.trie(), bonus=False)
    assert acc == 1 and verdicts == [True]
    assert sorted(out.seqs) == [(0, 1), (0, 3)]


def test_verify_strict_rejects_and_returns_target_beam():
    w, target, bundle = _strict_toy({1, 4})
    acc, out, verdicts = verify_strict(target, bundle, SDConfig(gamma=1, N=3, K=2), w.trie(), bonus=False)
    assert acc == 0 and verdicts == [False]
    assert sorted(out.seqs) == [(0, 1), (0, 4)]


def test_target_pass_refuses_unscored_prefixes():
    w, target, bundle = _strict_toy({1, 3})
    tp = _TargetPass(target, [(0,)])
    tp.masked(0, (0,), np.array([1, 2]))
    with pytest.raises(RuntimeError):
        tp.masked(0, (0, 1), np.array([1]))


def test_self_drafting_with_n_equal_k_accepts_everything():
    for seed in range(20):
        w = tiny_world(seed, n_items=20, codebook=(3, 3, 3, 3))
        m = random_model(w, make_rng(seed))
        for gamma in (1, 2, 3):
            for K in (1, 3):
                cfg = SDConfig(gamma=gamma, N=K, K=K)
                tr = sd_decode(m, m, w.context_of(0), cfg, w.trie())
                assert tr.accepted_steps[:-1] == [gamma] * (len(tr.steps) - 1)
                assert tr.accepted_steps[-1] == min(gamma, w.L - (gamma + 1) * (len(tr.steps) - 1))
                assert tr.ledger.target_calls == math.ceil(w.L / (gamma + 1))


def test_self_drafting_with_wider_draft_can_reject():
    # target K=1 keeps prefix 0 (p=.6); the width-2 draft keeps both and then prefers 1x (joint .2 > .15)
    items = [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1)]
    w = world_from_items(items)
    m = TabularModel(4, 2)
    set_logits(m, 0, (), {0: math.log(0.6), 1: math.log(0.4)})
    tr = sd_decode(m, m, 0, SDConfig(gamma=2, N=2, K=1), w.trie())
    assert tr.accepted_steps == [1]
    assert tr.final_topK.seqs == beam_search(m, 0, BeamConfig(1, max_len=2), w.trie()).seqs


@given(st.integers(0, 100_000), st.sampled_from([1, 2, 3, 5]), st.integers(0, 3), st.sampled_from([1, 2, 4]))
def test_strict_output_equals_target_beam_search(seed, K, extra, gamma):
    w = tiny_world(seed % 200, n_items=25, codebook=(3, 3, 3, 3))
    rng = make_rng(seed)
    target = random_model(w, rng)
    drafter = random_model(w, rng, scale=1.0, window=1)
    cfg = SDConfig(gamma=gamma, N=K + extra, K=K)
    for u in range(2):
        cid = w.context_of(u)
        tr = sd_decode(target, drafter, cid, cfg, w.trie())
        base, _ = baseline_decode(target, cid, cfg, w.trie())
        assert tr.final_topK.seqs == base.seqs
        assert tr.final_topK.logprobs == pytest.approx(base.logprobs, abs=1e-12)


def test_uniform_draft_mostly_rejects_but_stays_lossless(default_world, default_target):
    w, m = default_world, default_target
    uniform = TabularModel(w.vocab_size, w.L)
    cfg = SDConfig(gamma=4, N=10, K=10)
    steps, zero = 0, 0
    for u in w.split()[1][:50]:
        cid = w.context_of(u)
        tr = sd_decode(m, uniform, cid, cfg, w.trie())
        assert tr.final_topK.seqs == baseline_decode(m, cid, cfg, w.trie())[0].seqs
        steps += len(tr.steps)
        zero += sum(a == 0 for a in tr.accepted_steps)
    assert zero > steps / 2


# ---------------------------------------------------------------- accounting

def test_ledger_counts_for_strict_episode():
    for seed in range(10):
        w = tiny_world(seed, n_items=20, codebook=(3, 3, 3, 3))
        rng = make_rng(seed)
        target, drafter = random_model(w, rng), random_model(w, rng, window=1)
        cfg = SDConfig(gamma=2, N=4, K=2)
        tr = sd_decode(target, drafter, w.context_of(0), cfg, w.trie())
        assert tr.ledger.target_calls == len(tr.steps) <= w.L
        starts = [0] + [s["output_beam"].step for s in tr.steps[:-1]]
        assert tr.ledger.draft_calls == sum(min(cfg.gamma, w.L - d) for d in starts)
        assert tr.steps[-1]["output_beam"].step == w.L


def test_target_node_accounting_per_call():
    w = tiny_world(1, n_items=20, codebook=(3, 3, 3, 3))
    rng = make_rng(1)
    target, drafter = random_model(w, rng), random_model(w, rng, window=1)
    cfg = SDConfig(gamma=2, N=4, K=2)
    trie = w.trie()
    origin = ScoredBeam.root(w.context_of(0))
    led = CallLedger()
    bundle = draft(drafter, origin, cfg, trie)
    verify_strict(target, bundle, cfg, trie, bonus=True, ledger=led)
    assert led.target_calls == 1
    assert led.target_node_evals == len(origin) + flatten(bundle).node_count
    led2 = CallLedger()
    verify_strict(target, bundle, cfg, trie, bonus=False, ledger=led2)
    assert led2.target_node_evals == len(origin) + flatten(bundle, 1).node_count


def test_simulated_time():
    led = CallLedger(2, 8, 30, 40)
    assert simulated_time(led, 0.1) == pytest.approx(34.0)
    assert simulated_time(led, 0.1, call_cost=1.0) == pytest.approx(34.0 + 2 + 0.8)


# ---------------------------------------------------------------- tree batching

def test_flatten_hand_example():
    steps = [[(0,), (1,)], [(0, 2), (0, 3)], [(0, 2, 4), (0, 2, 5)]]
    seqs = [s for b in steps for s in b]
    tree = flatten_sequences(seqs, 0)
    assert tree.node_count == 6
    assert tree.naive_count == 2 * 1 + 2 * 2 + 2 * 3
    assert all(tree.reconstruct(tree.leaf_of[s]) == s for s in seqs)


def test_flatten_without_sharing_counts_every_token():
    seqs = [(0, 1), (1, 2), (2, 0)]
    tree = flatten_sequences(seqs, 0)
    assert tree.node_count == 6 and tree.savings == 0


def test_flatten_below_origin():
    tree = flatten_sequences([(3, 1), (3, 2), (4, 1)], 1)
    assert tree.node_count == 3
    assert tree.reconstruct(tree.leaf_of[(4, 1)]) == (4, 1)
    with pytest.raises(ValueError):
        tree.add((3,))


@given(st.lists(st.lists(st.integers(0, 3), min_size=1, max_size=4), min_size=1, max_size=12),
       st.lists(st.integers(0, 3), max_size=2))
def test_flatten_counts_distinct_prefixes_and_round_trips(tails, origin):
    origin = tuple(origin)
    seqs = sorted({origin + tuple(t) for t in tails})
    tree = flatten_sequences(seqs, len(origin))
    prefixes = {s[:t] for s in seqs for t in range(len(origin) + 1, len(s) + 1)}
    assert tree.node_count == len(prefixes) <= tree.naive_count
    assert all(tree.reconstruct(tree.leaf_of[s]) == s for s in seqs)
    assert all(tree.parent[i] < i for i in range(tree.node_count))


# ---------------------------------------------------------------- relaxed verification

def test_accept_prob_examples():
    assert accept_prob(0.2, 0.4) == pytest.approx(0.5)
    assert accept_prob(0.4, 0.2) == 1.0
    assert accept_prob(0.3, 0.0) == 1.0
    assert bool(accepts(0.2, 0.4, 0.5)) and not bool(accepts(0.2, 0.4, 0.5000001))


def test_residual_example():
    p, q = np.array([0.6, 0.4]), np.array([0.5, 0.5])
    assert normalize(np.maximum(0, p - q)).probs.tolist() == [1.0, 0.0]
    # a rejected single draw is always replaced by token 0
    rng = make_rng(0)
    for _ in range(200):
        ok, chosen = relaxed_step(p, q, [1], 1, rng)
        assert chosen == ([1] if ok else [0])


def test_resample_falls_back_when_residual_is_exhausted():
    p = np.array([0.5, 0.5, 0.0])
    q = np.array([0.5, 0.3, 0.2])
    # residual is all on token 1, which is already kept; the rest must come from p
    assert _resample(p, q, [1], 1, make_rng(0)) == [0]


def test_relaxed_step_identical_distributions_always_accept():
    rng = make_rng(1)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    for _ in range(500):
        ok, chosen = relaxed_step(p, p.copy(), [3, 1], 2, rng)
        assert ok and chosen == [3, 1]


def test_relaxed_acceptance_rate_matches_min_sum():
    rng = make_rng(2)
    p, q = np.array([0.5, 0.3, 0.2]), np.array([0.2, 0.2, 0.6])
    n = 100_000
    y = rng.choice(3, size=n, p=q)
    rate = accepts(p[y], q[y], rng.random(n)).mean()
    b = np.minimum(p, q).sum()
    assert abs(rate - b) <= 3 * math.sqrt(b * (1 - b) / n)


@pytest.mark.slow
def test_relaxed_k1_output_follows_target_joint():
    w = tiny_world(7, n_items=9, codebook=(3, 3), n_users=5)
    rng = make_rng(7)
    target, drafter = random_model(w, rng), random_model(w, rng, scale=1.0)
    cid, trie = w.context_of(0), w.trie()
    joint = enumerate_joint(target, cid, trie).table
    cfg = SDConfig(gamma=2, N=1, K=1, verification="relaxed")
    n = 100_000
    counts: dict = {}
    stream = make_rng(70)
    for _ in range(n):
        s = sd_decode(target, drafter, cid, cfg, trie, stream).final_topK.seqs[0]
        counts[s] = counts.get(s, 0) + 1
    for s, p in joint.items():
        assert abs(counts.get(s, 0) / n - p) <= 3 * math.sqrt(p * (1 - p) / n) + 1e-9


def test_relaxed_self_drafting_accepts_everything():
    w = tiny_world(3, n_items=20, codebook=(3, 3, 3, 3))
    m = random_model(w, make_rng(3))
    cfg = SDConfig(gamma=2, N=3, K=3, verification="relaxed")
    for r in range(20):
        tr = sd_decode(m, m, w.context_of(0), cfg, w.trie(), make_rng(r))
        assert tr.accepted_steps == [2, 1]


def test_relaxed_outputs_are_valid_and_sized():
    w = tiny_world(4, n_items=20, codebook=(3, 3, 3, 3))
    rng = make_rng(4)
    target, drafter = random_model(w, rng), random_model(w, rng, window=1)
    for literal in (False, True):
        cfg = SDConfig(gamma=2, N=4, K=4, verification="relaxed", alg2_literal=literal)
        for r in range(30):
            tr = sd_decode(target, drafter, w.context_of(0), cfg, w.trie(), make_rng(r))
            assert len(tr.final_topK) == 4
            assert set(tr.final_topK.seqs) <= set(w.items)


def test_relaxed_needs_rng():
    w = tiny_world(0)
    m = TabularModel(w.vocab_size, w.L)
    with pytest.raises(ValueError):
        sd_decode(m, m, 0, SDConfig(gamma=1, N=1, K=1, verification="relaxed"), w.trie())


def test_relaxed_verify_is_reproducible():
    w = tiny_world(5, n_items=20, codebook=(3, 3, 3, 3))
    rng = make_rng(5)
    target, drafter = random_model(w, rng), random_model(w, rng, window=1)
    cfg = SDConfig(gamma=2, N=3, K=3, verification="relaxed")
    a = sd_decode(target, drafter, w.context_of(0), cfg, w.trie(), make_rng(9))
    b = sd_decode(target, drafter, w.context_of(0), cfg, w.trie(), make_rng(9))
    assert a.final_topK == b.final_topK and a.accepted_steps == b.accepted_steps


def test_trace_summary_fields():
    w = tiny_world(0)
    m = random_model(w, make_rng(0))
    cfg = SDConfig(gamma=2, N=2, K=2)
    s = sd_decode(m, m, w.context_of(0), cfg, w.trie()).summary(7, cfg)
    assert s["user"] == 7 and s["K"] == 2 and s["verification"] == "strict"
    assert {"accepted_steps", "target_calls", "draft_calls", "target_node_evals", "draft_node_evals",
            "topK"} <= set(s)


def test_verify_relaxed_accepts_bundle_directly():
    w = tiny_world(6, n_items=20, codebook=(3, 3, 3, 3))
    rng = make_rng(6)
    target = random_model(w, rng)
    cfg = SDConfig(gamma=2, N=2, K=2, verification="relaxed")
    bundle = draft(target, ScoredBeam.root(w.context_of(0)), cfg, w.trie(), rng=make_rng(1))
    assert len(bundle.proposal_probs) == 2
    acc, out, verdicts = verify_relaxed(target, bundle, cfg, w.trie(), make_rng(2))
    assert acc == 2 and verdicts == [True, True] and out.step == 3
