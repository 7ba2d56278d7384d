"""Sentence- and corpus-level BLEU on token ids.

Sentence scores (the scalar reward) use add-one smoothing on the higher-order
precisions so a short or partially wrong hypothesis still gets a graded signal.
Corpus scores pool n-gram counts over all sentences first and apply no
smoothing, matching the usual corpus-level formulation.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .corpus import BOS_ID, EOS_ID, PAD_ID

MAX_ORDER = 4
_STRIPPED = (PAD_ID, BOS_ID, EOS_ID)


@dataclass(frozen=True)
class BleuScore:
    value: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float


def strip_special_tokens(ids) -> tuple[int, ...]:
    """Drop PAD/BOS/EOS. UNK stays: it is a scoreable token."""
    return tuple(i for i in ids if i not in _STRIPPED)


def _ngram_counts(seq, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def _check_stripped(seq, name: str) -> None:
    for i in seq:
        if i in _STRIPPED:
            raise ValueError(f"unstripped special token {i} in {name}")


def _geo_mean_value(precisions, bp: float) -> float:
    prod = 1.0
    for p in precisions:
        prod *= p
    return bp * prod ** (1.0 / MAX_ORDER)


def sentence_bleu(hyp, ref) -> BleuScore:
    """BLEU-4 of one hypothesis against one reference, both special-free.

    For n >= 2, a precision with zero matches (including the degenerate case
    of fewer than n tokens) is smoothed to (m+1)/(t+1). The unigram precision
    is never smoothed, so a hypothesis sharing no tokens with the reference
    scores 0. An empty hypothesis scores 0.
    """
    hyp = tuple(hyp)
    ref = tuple(ref)
    _check_stripped(hyp, "hypothesis")
    _check_stripped(ref, "reference")
    if not hyp:
        return BleuScore(0.0, (0.0, 0.0, 0.0, 0.0), 1.0)

    precisions = []
    for n in range(1, MAX_ORDER + 1):
        total = max(0, len(hyp) - n + 1)
        if total:
            ref_counts = _ngram_counts(ref, n)
            matches = sum(
                min(c, ref_counts[g]) for g, c in _ngram_counts(hyp, n).items()
            )
        else:
            matches = 0
        if n == 1:
            precisions.append(matches / total)
        elif matches == 0:
            precisions.append((matches + 1) / (total + 1))
        else:
            precisions.append(matches / total)

    bp = math.exp(1.0 - len(ref) / len(hyp)) if len(hyp) < len(ref) else 1.0
    precisions = tuple(precisions)
    return BleuScore(_geo_mean_value(precisions, bp), precisions, bp)


def corpus_bleu(hyps, refs) -> BleuScore:
    """Corpus BLEU-4: counts pooled over sentences, no smoothing.

    The brevity penalty uses the summed hypothesis and reference lengths.
    Any pooled precision of zero gives a score of 0.
    """
    hyps = [tuple(h) for h in hyps]
    refs = [tuple(r) for r in refs]
    if len(hyps) != len(refs):
        raise ValueError(f"length mismatch: {len(hyps)} hypotheses, {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    for hyp, ref in zip(hyps, refs):
        for n in range(1, MAX_ORDER + 1):
            total = max(0, len(hyp) - n + 1)
            if not total:
                continue
            totals[n - 1] += total
            ref_counts = _ngram_counts(ref, n)
            matches[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in _ngram_counts(hyp, n).items()
            )

    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return BleuScore(0.0, precisions, 1.0)
    bp = math.exp(1.0 - ref_len / hyp_len) if hyp_len < ref_len else 1.0
    return BleuScore(_geo_mean_value(precisions, bp), precisions, bp)
