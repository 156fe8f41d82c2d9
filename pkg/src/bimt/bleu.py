"""Corpus-level tokenized BLEU in the multi-bleu.perl convention (single reference, no smoothing)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import DataError

MAX_ORDER = 4


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self):
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.bleu:.2f}, {ps} (BP={self.brevity_penalty:.3f}, "
                f"hyp_len={self.hyp_len}, ref_len={self.ref_len})")


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str]) -> BleuReport:
    if len(hypotheses) != len(references):
        raise DataError(f"line count mismatch {len(hypotheses)} vs {len(references)}")
    if not hypotheses:
        raise DataError("cannot score an empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp_line, ref_line in zip(hypotheses, references):
        hyp, ref = hyp_line.split(), ref_line.split()
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    else:
        # (c - r) / c rounds better than 1 - r / c
        bp = 1.0 if hyp_len > ref_len else math.exp((hyp_len - ref_len) / hyp_len)
    if min(precisions) > 0:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    else:
        bleu = 0.0
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len)
