"""Corpus-level BLEU (orders 1-4, single reference, no smoothing).

Tokens are whitespace-split; input is expected to be tokenized and
lowercased already.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float
    precisions: list = field(default_factory=list)
    brevity_penalty: float = 0.0
    hyp_len: int = 0
    ref_len: int = 0
    matches: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def to_tsv(self) -> str:
        header = ["bleu", *(f"p{n}" for n in range(1, MAX_ORDER + 1)), "bp", "hyp_len", "ref_len"]
        values = [f"{self.bleu:.4f}", *(f"{p:.6f}" for p in self.precisions)]
        values += [f"{self.brevity_penalty:.6f}", str(self.hyp_len), str(self.ref_len)]
        return "\t".join(header) + "\n" + "\t".join(values) + "\n"

    def summary(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (
            f"BLEU = {self.bleu:.2f}, {ps} (BP={self.brevity_penalty:.3f}, "
            f"ratio={self.hyp_len / max(self.ref_len, 1):.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"
        )


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_order: int = MAX_ORDER) -> BleuReport:
    """Corpus BLEU of ``hypotheses`` against one reference line each."""
    hypotheses, references = list(hypotheses), list(references)
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hc, rc = ngrams(h, n), ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        log.warning("bleu: hypothesis corpus is empty; score defined as 0")
        return BleuReport(0.0, [0.0] * max_order, 0.0, 0, ref_len, matches, totals)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    if matches == totals and hyp_len == ref_len:
        score = 100.0  # guard the exp/log round trip for exact matches
    return BleuReport(score, precisions, bp, hyp_len, ref_len, matches, totals)
