import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kidlab import imperfect, toysql
from kidlab.imperfect import KEPT, REWRITTEN, MaskStrategy, SequenceTooShort
from kidlab.model import ModelConfig, count_forwards, forward, init_params, softmax
from kidlab.tokenizer import EOS, MASK, VOCAB

STRATEGIES = list(MaskStrategy)


@pytest.fixture(scope="module")
def student():
    return init_params(ModelConfig.student(), seed=0)


def test_mask_count_rule():
    assert imperfect.mask_count(10, 0.2) == 2
    assert imperfect.mask_count(3, 0.1) == 1
    assert imperfect.mask_count(5, 0.5) == 3  # half-up rounding of 2.5
    assert imperfect.mask_count(2, 0.9) == 1  # EOS is never maskable
    with pytest.raises(SequenceTooShort):
        imperfect.mask_count(1, 0.2)


@given(st.integers(2, 40), st.sampled_from([0.1, 0.2, 0.3, 0.4, 0.5]), st.integers(0, 2**31))
def test_random_and_uniform_positions(n, alpha, seed):
    gold = [10] * (n - 1) + [EOS]
    for strat in (MaskStrategy.RANDOM, MaskStrategy.UNIFORM):
        pos = imperfect.select_mask_positions(strat, gold, None, [1], seed, alpha)
        assert pos == sorted(set(pos))
        assert len(pos) == imperfect.mask_count(n, alpha)
        assert all(0 <= i < n - 1 for i in pos)


def test_uniform_is_evenly_spaced():
    gold = list(range(10, 30)) + [EOS]
    pos = imperfect.select_mask_positions(MaskStrategy.UNIFORM, gold, None, [1], seed=7, alpha=0.2)
    assert pos == [2, 7, 12, 17]


def _entropy(logits):
    q = softmax(np.asarray(logits, float))
    return -(q * np.log(q)).sum(-1)


def test_hard_and_easy_follow_entropy(monkeypatch):
    # Synthetic step logits: near-delta at position 0, flat at position 4, in between elsewhere.
    V = 20
    logits = np.tile(np.eye(V)[0] * 3.0, (11, 1))
    logits[0] = np.eye(V)[0] * 50.0
    logits[4] = np.zeros(V)
    ent = _entropy(logits)
    monkeypatch.setattr(imperfect, "step_entropies", lambda params, prompts, golds: [ent])
    gold = list(range(50, 60)) + [EOS]
    hard = imperfect.select_mask_positions(MaskStrategy.HARD, gold, None, [1], 0, alpha=0.1)
    easy = imperfect.select_mask_positions(MaskStrategy.EASY, gold, None, [1], 0, alpha=0.1)
    assert hard == [4] and easy == [0]
    # ties among the remaining equal-entropy positions go to the lowest index
    assert imperfect.select_mask_positions(MaskStrategy.HARD, gold, None, [1], 0, alpha=0.2) == [1, 4]


def test_step_entropies_match_forward(student):
    prompt, gold = [1, 20, 21], [30, 31, 32, EOS]
    ent = imperfect.step_entropies(student, [prompt], [gold])[0]
    probs = forward(student, prompt, gold)
    assert np.allclose(ent, -(probs * np.log(probs)).sum(-1), atol=1e-6)


def test_fill_rejects_unmasked(student):
    with pytest.raises(ValueError):
        imperfect.fill_masks(student, [1, 20], [30, EOS])


def test_fill_never_emits_specials(student):
    fills = imperfect.fill_masks(student, [1, 20, 21], [MASK, MASK, 30, MASK, EOS], mode="sample", seed=3)
    assert [i for i, _ in fills] == [0, 1, 3]
    assert all(t >= 4 for _, t in fills)
    assert fills == imperfect.fill_masks(student, [1, 20, 21], [MASK, MASK, 30, MASK, EOS], mode="sample", seed=3)


def test_memorising_student_fills_gold_back():
    from kidlab.distill import DistillConfig, Seeds, train

    world = toysql.generate_world(5, 1, 1)
    world.eval = world.train
    res = train(world, ModelConfig.student(), DistillConfig("SFT", steps=150, lr=3e-3, seeds=Seeds(0, 0, 0)))
    prompt, gold = imperfect.encode_example(world.train[0])
    for i in range(len(gold) - 1):
        fills = imperfect.fill_masks(res.params, prompt, imperfect.apply_mask(gold, [i]))
        assert fills == [(i, gold[i])]


def _check_sample(s, alpha):
    assert len(s.rewritten) == len(s.gold)
    assert len(s.masked_positions) == imperfect.mask_count(len(s.gold), alpha)
    assert len(s.gold) - 1 not in s.masked_positions
    for i, (g, r, prov) in enumerate(zip(s.gold, s.rewritten, s.provenance)):
        if i in s.masked_positions:
            assert prov == REWRITTEN and r != MASK
        else:
            assert prov == KEPT and r == g


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_make_imperfect_invariants_and_cost(strategy, student, small_world):
    for k, ex in enumerate(small_world.examples[:40]):
        with count_forwards() as c:
            s = imperfect.make_imperfect(strategy, student, ex, seed=k)
        assert c.passes == (2 if strategy.needs_confidence else 1)
        _check_sample(s, imperfect.DEFAULT_ALPHA)
        assert s == imperfect.make_imperfect(strategy, student, ex, seed=k)


def test_masking_only_keeps_mask_tokens(student, small_world):
    ex = small_world.train[0]
    with count_forwards() as c:
        s = imperfect.make_imperfect(MaskStrategy.RANDOM, student, ex, seed=1, rewrite=False)
    assert c.passes == 0
    assert all(s.rewritten[i] == MASK for i in s.masked_positions)


def test_untrained_fills_rarely_hit_gold(student, small_world):
    prompts, golds = zip(*(imperfect.encode_example(e) for e in small_world.examples))
    hits = total = 0
    rng = np.random.default_rng(0)
    while total < 1000:
        idx = rng.integers(len(prompts), size=32)
        batch = imperfect.make_imperfect_batch(MaskStrategy.RANDOM, student, [prompts[i] for i in idx],
                                               [golds[i] for i in idx], rng.integers(0, 2**31, size=32))
        for s in batch:
            for i in s.masked_positions:
                hits += s.rewritten[i] == s.gold[i]
                total += 1
    assert 1 - hits / total > 0.9


def test_debug_dump_fields(student, small_world):
    s = imperfect.make_imperfect("uniform", student, small_world.train[3], seed=2)
    doc = json.loads(s.to_json("uniform", 0.2))
    assert set(doc) == {"gold_text", "rewritten_text", "masked_positions", "strategy", "alpha"}
    assert doc["gold_text"] == small_world.train[3].gold_sql
