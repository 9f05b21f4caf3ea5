"""Translation accuracy and diversity metrics over token sequences.

All functions accept sentences as token lists (ints or strings); plain
strings are split on whitespace.
"""

from __future__ import annotations

import itertools
import math
import zlib
from collections import Counter
from typing import Callable, Sequence

import numpy as np

COMPRESSION_LEVEL = 6


def _toks(s) -> list:
    return s.split() if isinstance(s, str) else list(s)


def ngrams(tokens: Sequence, n: int) -> list[tuple]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu_n(candidate, reference, n_max: int = 4) -> float:
    """Sentence BLEU with brevity penalty.

    Orders with zero matched n-grams use ``1 / (count + 1)`` in place of the
    zero precision; other orders are unsmoothed. An empty candidate scores 0.
    """
    if not 1 <= n_max <= 4:
        raise ValueError(f"n_max must be in [1, 4], got {n_max}")
    cand, ref = _toks(candidate), _toks(reference)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, n_max + 1):
        c_counts = Counter(ngrams(cand, n))
        r_counts = Counter(ngrams(ref, n))
        total = max(len(cand) - n + 1, 0)
        match = sum(min(c, r_counts[g]) for g, c in c_counts.items())
        p = match / total if match > 0 else 1.0 / (total + 1)
        log_p += math.log(p) / n_max
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(cand)))
    return bp * math.exp(log_p)


def corpus_bleu(candidates, references, n_max: int = 4) -> float:
    """Corpus BLEU: pooled clipped matches per order, brevity penalty on total lengths."""
    cands = [_toks(c) for c in candidates]
    refs = [_toks(r) for r in references]
    if len(cands) != len(refs):
        raise ValueError("candidates and references differ in length")
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    if c_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, n_max + 1):
        match = total = 0
        for c, r in zip(cands, refs):
            rc = Counter(ngrams(r, n))
            match += sum(min(k, rc[g]) for g, k in Counter(ngrams(c, n)).items())
            total += max(len(c) - n + 1, 0)
        p = match / total if match > 0 else 1.0 / (total + 1)
        log_p += math.log(p) / n_max
    return math.exp(min(0.0, 1.0 - r_len / c_len)) * math.exp(log_p)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """F1 of the longest common subsequence; two empty sentences score 1."""
    cand, ref = _toks(candidate), _toks(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    # 2PR / (P + R) with P = lcs/|c|, R = lcs/|r|, as one exact integer ratio
    return 2 * lcs / (len(cand) + len(ref))


def diversity(preds, orders=(2, 3, 4)) -> float:
    """Product over n of unique n-grams / total n-grams, pooled over the corpus."""
    sents = [_toks(s) for s in preds]
    unique = total = 1
    for n in orders:
        grams = [g for s in sents for g in ngrams(s, n)]
        if not grams:
            raise ValueError(f"corpus has no {n}-grams")
        unique *= len(set(grams))
        total *= len(grams)
    return unique / total


def compression_ratio(preds) -> float:
    """Raw byte size of the newline-joined corpus over its DEFLATE (level 6) size.

    Tiny corpora can score below 1 because of the compressor's header.
    """
    if not preds:
        raise ValueError("empty corpus")
    text = "\n".join(" ".join(map(str, _toks(s))) for s in preds).encode("utf-8")
    return len(text) / len(zlib.compress(text, COMPRESSION_LEVEL))


def homogenization(preds, max_pairs: int = 2000, seed: int = 0) -> float:
    """Mean ROUGE-L over unordered pairs of distinct predictions (by position).

    With more than ``max_pairs`` pairs, a fixed-seed sample of pairs is used.
    """
    n = len(preds)
    if n < 2:
        raise ValueError("homogenization needs at least two predictions")
    sents = [_toks(s) for s in preds]
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        pairs = itertools.combinations(range(n), 2)
    else:
        rng = np.random.default_rng(seed)
        flat = np.sort(rng.choice(n_pairs, size=max_pairs, replace=False))
        pairs = (_unrank_pair(int(k), n) for k in flat)
    scores = [rouge_l(sents[i], sents[j]) for i, j in pairs]
    return float(np.mean(scores))


def _unrank_pair(k: int, n: int) -> tuple[int, int]:
    i = 0
    while k >= n - 1 - i:
        k -= n - 1 - i
        i += 1
    return i, i + 1 + k


def homogenization_per_source(candidate_sets, max_pairs: int = 2000, seed: int = 0) -> float:
    """Mean over sources of the homogenization within each candidate set."""
    vals = [homogenization(c, max_pairs, seed) for c in candidate_sets if len(c) >= 2]
    if not vals:
        raise ValueError("no candidate set has two or more sentences")
    return float(np.mean(vals))


def memorization(preds, train) -> float:
    """Share of predicted 4-grams (with multiplicity) that occur anywhere in ``train``."""
    train_grams = {g for s in train for g in ngrams(_toks(s), 4)}
    grams = [g for s in preds for g in ngrams(_toks(s), 4)]
    if not grams:
        raise ValueError("predictions contain no 4-grams")
    return sum(g in train_grams for g in grams) / len(grams)


def embed_similarity(candidate, reference, embed: Callable[[list], np.ndarray]) -> float:
    """Greedy cosine token matching between contextual embeddings, F1-aggregated.

    ``embed`` maps a token list to an ``[L, D]`` array. This is a learned
    stand-in reported as ``embsim``; it is not comparable to BERTScore.
    """
    cand, ref = _toks(candidate), _toks(reference)
    if not cand or not ref:
        raise ValueError("embed_similarity needs two non-empty sentences")
    ec, er = np.asarray(embed(cand), dtype=np.float64), np.asarray(embed(ref), dtype=np.float64)
    ec = ec / np.maximum(np.linalg.norm(ec, axis=1, keepdims=True), 1e-12)
    er = er / np.maximum(np.linalg.norm(er, axis=1, keepdims=True), 1e-12)
    sim = ec @ er.T
    p = float(sim.max(axis=1).mean())
    r = float(sim.max(axis=0).mean())
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def metrics_report(preds, refs, train, embed=None, max_pairs: int = 2000) -> dict:
    """All accuracy and diversity metrics for one set of predictions."""
    preds = [_toks(p) for p in preds]
    refs = [_toks(r) for r in refs]
    report: dict = {}
    for n in range(1, 5):
        per = [bleu_n(p, r, n) for p, r in zip(preds, refs)]
        report[f"bleu{n}"] = {"corpus": corpus_bleu(preds, refs, n), "mean": float(np.mean(per)), "per_sample": per}
    per = [rouge_l(p, r) for p, r in zip(preds, refs)]
    report["rougeL"] = {"corpus": float(np.mean(per)), "per_sample": per}
    report["diversity"] = {"corpus": _safe(diversity, preds)}
    report["compression_ratio"] = {"corpus": compression_ratio(preds)}
    report["homogenization"] = {"corpus": _safe(homogenization, preds, max_pairs)}
    report["memorization"] = {"corpus": _safe(memorization, preds, train)}
    if embed is not None:
        per = [embed_similarity(p, r, embed) if p and r else 0.0 for p, r in zip(preds, refs)]
        report["embsim"] = {"corpus": float(np.mean(per)), "per_sample": per}
    return report


def _safe(fn, *args):
    try:
        return fn(*args)
    except ValueError:
        return None
