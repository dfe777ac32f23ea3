import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsnmt.bleu import bleu


def count_oracle(hyps, refs, n):
    """Clipped n-gram matches and totals, counted with plain loops."""
    match = total = 0
    for h, r in zip(hyps, refs):
        h, r = h.split(), r.split()
        hg = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
        rg = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
        total += len(hg)
        for g in set(hg):
            match += min(hg.count(g), rg.count(g))
    return match, total


def test_identical_is_100():
    assert bleu(["a b c d e"], ["a b c d e"]).bleu == 100.0


def test_count_clipping():
    r = bleu(["the the the the"], ["the cat"])
    assert r.precisions[0] == pytest.approx(1 / 4)
    assert r.matches[0] == 1 and r.totals[0] == 4


def test_zero_four_gram_precision_zeroes_score():
    r = bleu(["the cat sat down"], ["the cat sat"])
    assert r.brevity_penalty == 1.0
    assert r.precisions[:3] == pytest.approx([3 / 4, 2 / 3, 1 / 2])
    assert r.precisions[3] == 0.0
    assert r.bleu == 0.0


def test_brevity_penalty_and_geometric_mean():
    hyp, ref = "a b c d e f", "a b c d e f g h"
    r = bleu([hyp], [ref])
    assert r.precisions == [1.0, 1.0, 1.0, 1.0]
    assert r.brevity_penalty == pytest.approx(math.exp(1 - 8 / 6))
    assert r.bleu == pytest.approx(100 * math.exp(1 - 8 / 6))


def test_hand_computed_mixed_case():
    hyp = ["a b c d x", "e f g h"]
    ref = ["a b c d e", "e f g h"]
    p = [8 / 9, 6 / 7, 4 / 5, 2 / 3]
    expected = 100 * math.exp(sum(math.log(x) for x in p) / 4) * math.exp(min(0.0, 1 - 9 / 9))
    assert bleu(hyp, ref).bleu == pytest.approx(expected, rel=1e-12)


def test_corpus_level_aggregation_differs_from_sentence_mean():
    # one sentence has no 4-grams at all; corpus aggregation still scores
    r = bleu(["a b c d", "x y"], ["a b c d", "x y"])
    assert r.bleu == 100.0


def test_empty_hypothesis_corpus_scores_zero():
    r = bleu(["", ""], ["a b", "c"])
    assert r.bleu == 0.0 and r.hyp_len == 0


def test_line_count_mismatch():
    with pytest.raises(ValueError):
        bleu(["a"], ["a", "b"])


def test_self_bleu_large_corpus():
    rng = random.Random(0)
    lines = [" ".join(f"w{rng.randrange(60)}" for _ in range(rng.randint(6, 16))) for _ in range(500)]
    assert bleu(lines, lines).bleu == 100.0


def test_report_formats():
    r = bleu(["a b c d"], ["a b c d"])
    head, row = r.to_tsv().splitlines()
    assert head.split("\t")[0] == "bleu" and row.split("\t")[0] == "100.0000"
    assert r.summary().startswith("BLEU = 100.00")


words = st.sampled_from(["a", "b", "c", "d", "e"])
line = st.lists(words, min_size=1, max_size=10).map(" ".join)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(line, line), min_size=1, max_size=20))
def test_counts_match_independent_oracle(pairs):
    hyps, refs = [h for h, _ in pairs], [r for _, r in pairs]
    rep = bleu(hyps, refs)
    for n in range(1, 5):
        assert (rep.matches[n - 1], rep.totals[n - 1]) == count_oracle(hyps, refs, n)
    assert 0.0 <= rep.bleu <= 100.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(line, line), min_size=1, max_size=20), st.randoms())
def test_joint_permutation_invariance(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = bleu([h for h, _ in pairs], [r for _, r in pairs]).bleu
    b = bleu([h for h, _ in shuffled], [r for _, r in shuffled]).bleu
    assert a == pytest.approx(b, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(line, line), min_size=1, max_size=19), line)
def test_adding_identical_pair_keeps_counts_consistent(pairs, extra):
    hyps, refs = [h for h, _ in pairs], [r for _, r in pairs]
    before = bleu(hyps, refs)
    after = bleu(hyps + [extra], refs + [extra])
    n_tokens = len(extra.split())
    assert after.matches[0] == before.matches[0] + n_tokens
    assert after.totals[0] == before.totals[0] + n_tokens
    assert (after.matches[0], after.totals[0]) == count_oracle(hyps + [extra], refs + [extra], 1)


@settings(max_examples=30, deadline=None)
@given(st.lists(line, min_size=1, max_size=20))
def test_self_bleu_is_exactly_100(lines):
    assert bleu(lines, lines).bleu == 100.0
