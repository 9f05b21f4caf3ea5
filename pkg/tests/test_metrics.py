import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffslt.metrics import (
    bleu_n,
    compression_ratio,
    corpus_bleu,
    diversity,
    embed_similarity,
    homogenization,
    memorization,
    metrics_report,
    rouge_l,
)
from helpers import brute_diversity, brute_memorization, brute_rouge, reference_bleu

sentences = st.lists(st.integers(0, 6), min_size=0, max_size=12)


def test_bleu_identity_and_empty():
    s = "the rain spreads over the coast later".split()
    assert bleu_n(s, s) == pytest.approx(1.0)
    assert bleu_n([], s) == 0.0


def test_bleu_zero_four_gram_overlap_matches_reference():
    cand, ref = "a b c d e".split(), "a b x c d y e".split()
    assert bleu_n(cand, ref) == pytest.approx(reference_bleu(cand, ref), abs=1e-9)
    # by hand: p1 = 5/5, p2 = 2/4, p3 = 1/(3+1), p4 = 1/(2+1), BP = exp(1 - 7/5)
    hand = math.exp(1 - 7 / 5) * (1 * 0.5 * 0.25 * (1 / 3)) ** 0.25
    assert bleu_n(cand, ref) == pytest.approx(hand, abs=1e-12)


def test_bleu_brevity_penalty():
    ref = "a b c d e f g h".split()
    cand = ref[:4]
    assert bleu_n(cand, ref) == pytest.approx(math.exp(1 - 2), abs=1e-12)


def test_bleu_matches_reference_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = rng.integers(0, 6, size=rng.integers(1, 15)).tolist()
        r = rng.integers(0, 6, size=rng.integers(1, 15)).tolist()
        for n in range(1, 5):
            assert abs(bleu_n(c, r, n) - reference_bleu(c, r, n)) <= 1e-9


def test_bleu_order_bounds():
    with pytest.raises(ValueError):
        bleu_n([1], [1], 5)


@settings(max_examples=200, deadline=None)
@given(sentences, sentences)
def test_bleu_in_unit_interval(c, r):
    for n in range(1, 5):
        assert 0.0 <= bleu_n(c, r, n) <= 1.0 + 1e-12


def test_corpus_bleu_single_pair_equals_sentence_bleu():
    c, r = "a b c d e f".split(), "a b c e f".split()
    assert corpus_bleu([c], [r]) == pytest.approx(bleu_n(c, r))


def test_rouge_examples():
    assert rouge_l("a b c", "a b c") == 1.0
    assert rouge_l("a b", "c d") == 0.0
    assert rouge_l("a b c", "a c") == pytest.approx(0.8)


def test_rouge_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = rng.integers(0, 5, size=rng.integers(0, 9)).tolist()
        r = rng.integers(0, 5, size=rng.integers(0, 9)).tolist()
        assert rouge_l(c, r) == pytest.approx(float(brute_rouge(c, r)), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(sentences, sentences)
def test_rouge_bounds(c, r):
    assert 0.0 <= rouge_l(c, r) <= 1.0


def test_diversity_examples():
    s = "one two three four five six".split()
    assert diversity([s]) == 1.0
    for m in (2, 3, 7):
        assert diversity([s] * m) == pytest.approx((1 / m) ** 3, abs=1e-15)
    corpus = ["a b c d e".split(), "a b c x y".split(), "x y a b c".split()]
    assert diversity(corpus) == pytest.approx(float(brute_diversity(corpus)), abs=1e-15)


def test_diversity_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        corpus = [rng.integers(0, 4, size=rng.integers(4, 9)).tolist() for _ in range(rng.integers(1, 5))]
        assert diversity(corpus) == pytest.approx(float(brute_diversity(corpus)), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 5), min_size=4, max_size=10), min_size=1, max_size=5))
def test_diversity_bounds(corpus):
    assert 0.0 < diversity(corpus) <= 1.0


def test_compression_ratio_orders_repetitive_above_distinct():
    from diffslt.data import Grammar

    rng = np.random.default_rng(0)
    grammar = Grammar()
    distinct = list({grammar.sample(rng)[1] for _ in range(400)})[:200]
    repetitive = [distinct[0]] * 200
    assert compression_ratio(repetitive) > compression_ratio(distinct)
    assert compression_ratio(list(distinct)) == compression_ratio(distinct)
    assert compression_ratio(["a"]) < 1.0  # header overhead on tiny input


def test_homogenization_examples():
    assert homogenization(["a b c"] * 4) == 1.0
    assert homogenization(["a b", "c d", "e f"]) == 0.0
    corpus = ["a b c", "a c", "b c d"]
    hand = (0.8 + 2 * (2 / 3 * 2 / 3) / (4 / 3) + 0.4) / 3
    assert homogenization(corpus) == pytest.approx(hand)


def test_homogenization_sampling_is_fixed_seed():
    rng = np.random.default_rng(3)
    corpus = [rng.integers(0, 6, size=6).tolist() for _ in range(100)]
    a, b = homogenization(corpus, max_pairs=50), homogenization(corpus, max_pairs=50)
    assert a == b
    assert 0.0 <= a <= 1.0
    assert homogenization(corpus[:10], max_pairs=10_000) == pytest.approx(
        np.mean([rouge_l(corpus[i], corpus[j]) for i in range(10) for j in range(i + 1, 10)]))


def test_memorization_examples():
    train = ["a b c d e".split(), "f g h i".split()]
    assert memorization(train, train) == 1.0
    assert memorization(["w x y z".split()], train) == 0.0
    assert memorization(["a b c d e q".split()], train) == pytest.approx(2 / 3)  # c d e q misses
    half = ["a b c d".split(), "q r s t".split()]
    assert memorization(half, train) == 0.5


def test_memorization_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(50):
        train = [rng.integers(0, 3, size=rng.integers(4, 8)).tolist() for _ in range(3)]
        preds = [rng.integers(0, 3, size=rng.integers(4, 8)).tolist() for _ in range(3)]
        assert memorization(preds, train) == pytest.approx(float(brute_memorization(preds, train)), abs=1e-15)


def _table_embed(tokens):
    table = np.random.default_rng(0).standard_normal((10, 4))
    return table[np.asarray(tokens)]


def test_embed_similarity():
    assert embed_similarity([1, 2, 3], [1, 2, 3], _table_embed) == pytest.approx(1.0)
    a, b = [1, 4, 7], [2, 4, 9]
    assert embed_similarity(a, b, _table_embed) == pytest.approx(embed_similarity(b, a, _table_embed))
    # brute force: normalised rows, max over each side, harmonic mean
    ea, eb = _table_embed(a), _table_embed(b)
    ea = ea / np.linalg.norm(ea, axis=1, keepdims=True)
    eb = eb / np.linalg.norm(eb, axis=1, keepdims=True)
    sims = [[float(x @ y) for y in eb] for x in ea]
    p = sum(max(row) for row in sims) / 3
    r = sum(max(sims[i][j] for i in range(3)) for j in range(3)) / 3
    assert embed_similarity(a, b, _table_embed) == pytest.approx(2 * p * r / (p + r))


def test_metrics_report_is_pure():
    preds = ["a b c d e", "a b c d f", "x y z w v"]
    refs = ["a b c d e", "a b c d e", "x y z w"]
    train = ["a b c d e"]
    assert metrics_report(preds, refs, train) == metrics_report(preds, refs, train)
