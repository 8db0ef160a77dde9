import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from normforge.evaluation import (bleu, bootstrap_significance, label_smoothed_perplexity,
                                  perplexity_from_loss, sentence_stats)


MICRO_HYP = ["the cat sat on the mat", "a dog runs fast today"]
MICRO_REF = ["the cat is on the mat", "a dog runs fast today"]


def test_perfect_match_is_100():
    refs = ["a b c d e", "f g h i"]
    r = bleu(refs, refs)
    assert round(r.bleu, 3) == 100.000 and r.brevity_penalty == 1.0


def test_clipping_example():
    r = bleu(["a a a"], ["a b c"])
    assert r.precisions[0] == pytest.approx(1 / 3)
    assert r.precisions[1] == 0.0 and r.bleu == 0.0


def test_micro_corpus_fixture():
    # p1 = 10/11, p2 = 7/9, p3 = 4/7, p4 = 2/5 counted by hand; lengths 11/11 so BP = 1
    r = bleu(MICRO_HYP, MICRO_REF)
    assert r.precisions == pytest.approx((10 / 11, 7 / 9, 4 / 7, 2 / 5))
    assert round(r.bleu, 3) == 63.405
    assert r.bleu == pytest.approx(oracles.corpus_bleu(MICRO_HYP, MICRO_REF), abs=1e-9)


def test_brevity_penalty():
    r = bleu(["a b c d"], ["a b c d e f g h"])
    assert r.brevity_penalty == pytest.approx(math.exp(1 - 2))
    assert r.bleu == pytest.approx(100 * math.exp(-1))


def test_empty_hypothesis_and_errors():
    r = bleu([""], ["a b"])
    assert r.bleu == 0.0 and 0 < r.brevity_penalty <= 1
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu(["a"], ["a", "b"])


def test_token_id_sequences_accepted():
    assert bleu([[4, 5, 6, 7]], [[4, 5, 6, 7]]).bleu == pytest.approx(100.0)


def test_sentence_stats_layout():
    s = sentence_stats("a b", "a c d", max_n=2)
    assert s.tolist() == [2, 3, 1, 2, 0, 1]


words = st.lists(st.sampled_from("abcde"), min_size=0, max_size=12).map(" ".join)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=6))
def test_bleu_matches_oracle_and_bounds(pairs):
    hyps, refs = zip(*pairs)
    r = bleu(hyps, refs)
    assert r.bleu == pytest.approx(oracles.corpus_bleu(hyps, refs), abs=1e-9)
    assert 0 <= r.bleu <= 100 + 1e-9 and 0 < r.brevity_penalty <= 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=6), st.randoms())
def test_bleu_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = bleu(*zip(*pairs)).bleu
    b = bleu(*zip(*shuffled)).bleu
    assert a == pytest.approx(b, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=6),
       st.lists(st.sampled_from("abcde"), min_size=4, max_size=10))
def test_appending_perfect_pair_never_lowers_bleu(pairs, extra):
    hyps, refs = map(list, zip(*pairs))
    hl = sum(len(h.split()) for h in hyps)
    rl = sum(len(r.split()) for r in refs)
    # length-safe: only meaningful when the corpus is not already shorter than its reference
    if hl < rl or hl == 0:
        return
    before = bleu(hyps, refs).bleu
    s = " ".join(extra)
    assert bleu(hyps + [s], refs + [s]).bleu >= before - 1e-9


def test_bootstrap_identical_systems():
    refs = [" ".join(np.random.default_rng(i).choice(list("abcdef"), 8)) for i in range(30)]
    hyps = [r if i % 3 else "a b c" for i, r in enumerate(refs)]
    rep = bootstrap_significance(hyps, hyps, refs, 1000, seed=0)
    assert 0.3 <= rep.p_value <= 0.7 and rep.ties == 1000
    strict = bootstrap_significance(hyps, hyps, refs, 1000, seed=0, ties="b")
    assert strict.p_value == 1.0


def test_bootstrap_dominance():
    refs = [f"w{i} x y z q" for i in range(20)]
    bad = ["nothing matches here at all" for _ in refs]
    rep = bootstrap_significance(refs, bad, refs, 500, seed=1)
    assert rep.p_value == 0.0 and rep.wins_a == 500
    assert bootstrap_significance(bad, refs, refs, 500, seed=1).p_value == 1.0


def test_bootstrap_determinism_fixture():
    refs = ["a b c d e", "b c d e f", "c d e f g", "d e f g h", "e f g h i",
            "f g h i j", "g h i j k", "h i j k l", "i j k l m", "j k l m n"]
    a = ["a b c d x", "b c d e f", "c d e x g", "d e f g h", "e f g h i",
         "f x h i j", "g h i j k", "h i j k l", "i j k x m", "j k l m n"]
    b = ["a b x d e", "b c d e f", "c d e f g", "d x f g h", "e f g h i",
         "f g h i j", "g h x j k", "h i j k l", "i j k l m", "j x l m n"]
    r1 = bootstrap_significance(a, b, refs, 200, seed=42)
    r2 = bootstrap_significance(a, b, refs, 200, seed=42)
    assert r1 == r2
    assert r1.wins_a + r1.wins_b + r1.ties == 200
    # frozen regression values for seed 42
    assert (r1.wins_a, r1.wins_b, r1.ties) == (124, 74, 2)
    assert r1.p_value == pytest.approx(0.375)
    assert round(r1.bleu_a, 2) == 78.42 and round(r1.bleu_b, 2) == 73.66


def test_bootstrap_seed_average():
    refs = [" ".join(np.random.default_rng(i).choice(list("abcdef"), 6)) for i in range(15)]
    hyps = [" ".join(np.random.default_rng(100 + i).choice(list("abcdef"), 6)) for i in range(15)]
    ps = [bootstrap_significance(hyps, hyps, refs, 100, seed=s).p_value for s in range(20)]
    assert 0.4 <= np.mean(ps) <= 0.6


def test_bootstrap_validation():
    with pytest.raises(ValueError):
        bootstrap_significance(["a"], ["a"], ["a"], 50)
    with pytest.raises(ValueError):
        bootstrap_significance(["a"], ["a", "b"], ["a"], 100)
    with pytest.raises(ValueError):
        bootstrap_significance(["a"], ["a"], ["a"], 100, ties="a")


def test_uniform_perplexity_is_vocab_size():
    V = 7
    logits = np.zeros((5, V))
    for eps in (0.0, 0.1, 0.5):
        t = np.full((5, V), eps / V)
        t[np.arange(5), [0, 1, 2, 3, 4]] += 1 - eps
        assert label_smoothed_perplexity(logits, t) == pytest.approx(V, rel=1e-14)


def test_uniform_over_unmasked_tokens():
    logits = np.array([[-np.inf, 0.0, 0.0, 0.0, -np.inf]])
    t = np.array([[0.0, 0.9 + 0.1 / 3, 0.1 / 3, 0.1 / 3, 0.0]])
    assert label_smoothed_perplexity(logits, t) == pytest.approx(3.0, rel=1e-14)


def test_confident_model_perplexity_one():
    logits = np.array([[0.0, -np.inf], [-np.inf, 0.0]])
    t = np.eye(2)
    assert label_smoothed_perplexity(logits, t) == 1.0


def test_perplexity_hand_fixture():
    # token 1: p = (1/2, 1/4, 1/4), label 0; token 2: uniform, label 2; eps = 0.1 over 3 ids
    logits = np.array([[math.log(2), 0.0, 0.0], [0.0, 0.0, 0.0]])
    t = np.full((2, 3), 0.1 / 3)
    t[0, 0] += 0.9
    t[1, 2] += 0.9
    assert label_smoothed_perplexity(logits, t) == pytest.approx(2.50674, abs=1e-5)


def test_padding_rows_ignored():
    logits = np.zeros((3, 4))
    t = np.zeros((3, 4))
    t[0, 1] = t[2, 3] = 1.0
    assert label_smoothed_perplexity(logits, t) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        label_smoothed_perplexity(logits, np.zeros((3, 4)))
    assert perplexity_from_loss(2 * math.log(5), 2) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        perplexity_from_loss(1.0, 0)
