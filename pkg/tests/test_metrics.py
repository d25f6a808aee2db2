import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from semqg.metrics import (
    answerability, bleu, bleu4, em_f1, lcs_length, q_bleu1, qg_metric_reports, rouge_l, sentence_bleu,
    squad_normalize,
)
from semqg.rewards import RewardSignal, metric_reward

words = st.lists(st.sampled_from(["a", "b", "c", "d", "e", "who", "paris", "the"]), min_size=1, max_size=8)


def test_bleu_identical_is_100():
    assert bleu4(["a b c d e"], ["a b c d e"]) == pytest.approx(100.0)
    assert sentence_bleu("who was born ?".split(), "who was born ?".split()) == pytest.approx(100.0)


def test_bleu_hand_counted_precisions():
    r = bleu(["a b c d"], ["a b c e"])
    assert r.precisions == [3 / 4, 2 / 3, 1 / 2, 0.0]
    assert r.score == 0.0
    assert r.brevity_penalty == 1.0


def test_bleu_smoothed_sentence_oracle():
    # add-one on orders 2..4: 3/4, 3/4, 2/3, 1/2
    expected = 100 * (3 / 4 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert sentence_bleu("a b c d".split(), "a b c e".split()) == pytest.approx(expected, rel=1e-12)
    assert metric_reward("BLEU4", "a b c d".split(), "a b c e".split()) == pytest.approx(expected, rel=1e-12)


def test_bleu_empty_hypothesis_and_reference():
    assert bleu4([""], ["a b"]) == 0.0
    assert sentence_bleu([], ["a"]) == 0.0
    with pytest.raises(ValueError):
        bleu4(["a"], [""])
    with pytest.raises(ValueError):
        bleu4(["a"], ["a", "b"])


def test_bleu_brevity_penalty_oracle():
    r = bleu(["a b c d"], ["a b c d e f"])
    assert r.brevity_penalty == pytest.approx(math.exp(1 - 6 / 4))
    assert r.score == pytest.approx(100 * math.exp(1 - 6 / 4))


@given(st.lists(st.tuples(words, words), min_size=1, max_size=6), st.randoms())
@settings(max_examples=50)
def test_corpus_bleu_order_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = bleu4([h for h, _ in pairs], [r for _, r in pairs])
    b = bleu4([h for h, _ in shuffled], [r for _, r in shuffled])
    assert a == pytest.approx(b, abs=1e-9)
    assert 0.0 <= a <= 100.0


def test_rouge_l_hand_oracle():
    assert lcs_length("a c".split(), "a b c".split()) == 2
    p, r, beta = 1.0, 2 / 3, 1.2
    expected = 100 * (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
    assert rouge_l("a c", "a b c") == pytest.approx(expected, rel=1e-12)
    assert rouge_l("a b", "a b") == pytest.approx(100.0)
    assert rouge_l("x y", "a b") == 0.0
    assert metric_reward("ROUGE-L", [], ["a"]) == 0.0


@given(words, words)
def test_rouge_and_bleu_ranges(h, r):
    assert 0.0 <= rouge_l(h, r) <= 100.0 + 1e-9
    assert 0.0 <= sentence_bleu(h, r) <= 100.0 + 1e-9
    assert rouge_l(h, h) == pytest.approx(100.0)


def test_q_bleu1_limits():
    h, r = "who was born in paris ?".split(), "who moved to paris ?".split()
    b1 = bleu([h], [r], order=1).score / 100
    assert q_bleu1(h, r, delta=0.0) == b1
    assert q_bleu1(h, r, delta=1.0) == pytest.approx(answerability(h, r))
    assert q_bleu1(h, h) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        q_bleu1(h, r, weights={"question": 1.0, "entity": 0.5, "content": 0.0, "function": 0.0})


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_q_bleu1_monotone_in_bleu1(delta, b_lo, b_hi):
    # the mixture is affine in BLEU1 with slope (1 - delta) >= 0
    lo, hi = sorted((b_lo, b_hi))
    ans = 0.3
    assert delta * ans + (1 - delta) * lo <= delta * ans + (1 - delta) * hi


def test_q_bleu1_monotone_on_strings():
    ref = "who was born in paris ?".split()
    # same channel content for the answerability part, more unigram matches for BLEU1
    worse = "who was born in paris paris paris ?".split()
    assert q_bleu1(ref, ref) >= q_bleu1(worse, ref)


def test_squad_normalize_rules():
    assert squad_normalize("The Cat") == "cat"
    assert squad_normalize("cat") == "cat"
    assert squad_normalize("a, an, the") == ""
    assert squad_normalize("  Hello,   World! ") == "hello world"


def test_em_f1_examples():
    assert em_f1("The cat", ["cat"]) == (1, 1.0)
    em, f1 = em_f1("cat sat on", ["the cat sat"])
    assert em == 0 and f1 == pytest.approx(0.8)
    assert em_f1("dog", ["cat"]) == (0, 0.0)
    assert em_f1("dog", ["cat", "a dog"]) == (1, 1.0)
    with pytest.raises(ValueError):
        em_f1("x", [])


@given(words, words)
def test_f1_dominates_em(p, g):
    em, f1 = em_f1(" ".join(p), [" ".join(g)])
    assert f1 >= em or (em == 1 and not squad_normalize(" ".join(g)))


def test_reward_signal_ranges():
    RewardSignal(0.5, "QPP", "q", "x")
    RewardSignal(80.0, "BLEU4", "q", "x")
    with pytest.raises(ValueError):
        RewardSignal(1.5, "QAP", "q", "x")
    with pytest.raises(ValueError):
        RewardSignal(0.5, "METEOR", "q", "x")


def test_metric_reward_identical_and_empty():
    assert metric_reward("BLEU4", "a b c".split(), "a b c".split()) == pytest.approx(100.0)
    assert metric_reward("BLEU4", [], "a b c".split()) == 0.0
    assert metric_reward("ROUGE-L", "a b c".split(), "a b c".split()) == pytest.approx(100.0)


def test_qg_metric_reports_reproducible():
    rng = random.Random(0)
    hyps = [[rng.choice("abcde") for _ in range(5)] for _ in range(10)]
    refs = [[rng.choice("abcde") for _ in range(5)] for _ in range(10)]
    reps = {r.metric: r for r in qg_metric_reports(hyps, refs)}
    assert reps["BLEU4"].value == bleu4(hyps, refs)
    assert reps["ROUGE-L"].value == pytest.approx(sum(reps["ROUGE-L"].per_example) / 10)
    assert reps["ROUGE-L"].config == {"beta": 1.2}
