from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsnmt.data import (
    ParallelCorpus,
    apply_task,
    build_batches,
    cipher_table,
    corpus_from_text,
    corpus_to_text,
    gen_synthetic,
    make_batch,
    swap_adjacent,
    synthetic_vocabulary,
)
from rsnmt.errors import ParameterError
from rsnmt.subword import (
    BOS,
    EOS,
    EOW,
    PAD,
    UNK,
    SubwordModel,
    Vocabulary,
    bpe_decode,
    bpe_encode,
    bpe_train,
    build_vocabulary,
)

TEXT = [
    "the cat sat on the mat",
    "the dog sat on the log",
    "a cat and a dog met on a mat",
    "lower lowest newer newest wider widest",
]


# ---------------------------------------------------------------- vocabulary


def test_reserved_ids():
    v = Vocabulary(["x"])
    assert [v.token(i) for i in range(4)] == ["<pad>", "</s>", "<s>", "<unk>"]
    assert (PAD, EOS, BOS, UNK) == (0, 1, 2, 3)
    assert v.id("x") == 4 and len(v) == 5


def test_vocabulary_bijection_and_file_round_trip(tmp_path):
    v = Vocabulary.from_corpus(TEXT)
    for i in range(len(v)):
        assert v.id(v.token(i)) == i
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == v
    assert (tmp_path / "vocab.txt").read_text().splitlines()[4] == v.token(4)


def test_vocabulary_unknown_word_maps_to_unk():
    v = Vocabulary(["a"])
    assert v.from_text("a zzz") == [4, UNK]
    assert v.to_text([BOS, 4, UNK, EOS, PAD]) == "a <unk>"


# ---------------------------------------------------------------- BPE


def test_bpe_first_merge_hand_count():
    m = bpe_train(["aaab"], 1)
    # symbols a a a b</w>: pair (a,a) occurs twice, (a,b</w>) once
    assert m.merges == [("a", "a")]
    assert m.segment("aaab") == ("aa", "a", "b" + EOW)


def test_bpe_zero_merges_is_character_level():
    m = bpe_train(TEXT, 0)
    assert m.merges == []
    assert m.segment("cat") == ("c", "a", "t" + EOW)


def test_bpe_stops_when_no_pair_repeats():
    m = bpe_train(["abc"], 10)
    assert m.merges == []


def test_bpe_tie_break_is_lexicographic():
    # (a,b) and (c,d</w>) both occur twice; ("a","b") < ("c","d</w>")
    m = bpe_train(["ab", "ab", "cd", "cd"], 1)
    assert m.merges == [("a", "b" + EOW)]


def naive_bpe(lines, num_merges):
    """Straightforward recount-every-round BPE used as an oracle."""
    words = Counter(w for line in lines for w in line.split())
    segs = {w: tuple(w[:-1]) + (w[-1] + EOW,) for w in words}
    merges = []
    for _ in range(num_merges):
        stats = Counter()
        for w, f in words.items():
            s = segs[w]
            for p in zip(s, s[1:]):
                stats[p] += f
        if not stats:
            break
        best = max(stats.values())
        if best < 2:
            break
        pair = min(p for p, c in stats.items() if c == best)
        merges.append(pair)
        for w in words:
            s, out, i = segs[w], [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == pair:
                    out.append(s[i] + s[i + 1])
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            segs[w] = tuple(out)
    return merges


@pytest.mark.parametrize("n", [1, 5, 20, 60])
def test_bpe_matches_naive_oracle(n):
    assert bpe_train(TEXT, n).merges == naive_bpe(TEXT, n)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(alphabet="abcd ", min_size=1, max_size=20), min_size=1, max_size=8), st.integers(0, 15))
def test_bpe_oracle_and_round_trip_property(lines, n):
    if not any(l.split() for l in lines):
        return
    model = bpe_train(lines, n)
    assert model.merges == naive_bpe(lines, n)
    vocab = build_vocabulary(model, lines)
    for line in lines:
        ids = bpe_encode(model, vocab, line)
        assert UNK not in ids
        assert bpe_decode(vocab, ids) == " ".join(line.split())


def test_bpe_deterministic():
    assert bpe_train(TEXT, 30).merges == bpe_train(TEXT, 30).merges


def test_bpe_never_produces_reserved_ids():
    model = bpe_train(TEXT, 40)
    vocab = build_vocabulary(model, TEXT)
    for line in TEXT:
        assert min(bpe_encode(model, vocab, line)) >= 4


def test_bpe_unknown_character():
    model = bpe_train(TEXT, 10)
    vocab = build_vocabulary(model, TEXT)
    ids = bpe_encode(model, vocab, "cat€")
    assert UNK in ids
    assert "<unk>" in bpe_decode(vocab, ids)


def test_bpe_decode_reserved_ids_does_not_crash():
    vocab = build_vocabulary(bpe_train(TEXT, 5), TEXT)
    assert bpe_decode(vocab, [PAD, BOS, EOS]) == ""


def test_subword_model_file_round_trip(tmp_path):
    model = bpe_train(TEXT, 25)
    model.save(tmp_path / "codes")
    loaded = SubwordModel.load(tmp_path / "codes")
    assert loaded.merges == model.merges
    for line in TEXT:
        assert loaded.segment_line(line) == model.segment_line(line)


def test_bpe_empty_corpus_is_an_error():
    with pytest.raises(ParameterError):
        bpe_train(["", "   "], 3)


# ---------------------------------------------------------------- corpora and batches


def test_corpus_rejects_mismatch_and_empty_lines():
    with pytest.raises(ParameterError):
        ParallelCorpus([[4]], [])
    with pytest.raises(ParameterError):
        ParallelCorpus([[4], []], [[4], [5]])


def test_make_batch_layout():
    b = make_batch([[4, 5, 6], [7]], [[8, 9], [10, 11, 12]])
    assert b.src.tolist() == [[4, 5, 6, EOS], [7, EOS, PAD, PAD]]
    assert b.tgt_in.tolist() == [[BOS, 8, 9, PAD], [BOS, 10, 11, 12]]
    assert b.tgt_out.tolist() == [[8, 9, EOS, PAD], [10, 11, 12, EOS]]
    assert (b.src_mask == (b.src != PAD)).all()
    shifted = b.tgt_in[:, 1:]
    assert (shifted[shifted != PAD] == b.tgt_out[:, :-1][shifted != PAD]).all()


def _corpus(n=300, seed=0):
    return gen_synthetic("copy", n, 20, (1, 12), seed)


def test_batches_partition_corpus_and_respect_budget():
    c = _corpus()
    batches = build_batches(c, 64, seed=3)
    seen = sorted(int(i) for b in batches for i in b.index)
    assert seen == list(range(len(c)))
    for b in batches:
        assert b.src.size <= 64 and b.tgt_in.size <= 64
        for row, i in enumerate(b.index):
            assert b.src[row, : len(c.src[i])].tolist() == c.src[i]


def test_batches_deterministic_per_seed():
    c = _corpus()
    a = [b.index.tolist() for b in build_batches(c, 64, 7)]
    b = [b.index.tolist() for b in build_batches(c, 64, 7)]
    d = [b.index.tolist() for b in build_batches(c, 64, 8)]
    assert a == b and a != d


def test_batches_full_budget_single_batch():
    c = _corpus(20)
    longest = max(max(len(s), len(t)) for s, t in zip(c.src, c.tgt)) + 1
    assert len(build_batches(c, longest * len(c), 0)) == 1


def test_batches_skip_overlong_sentences():
    c = ParallelCorpus([[4] * 3, [4] * 30, [5] * 2], [[4] * 3, [4] * 30, [5] * 2])
    batches, skipped = build_batches(c, 10, 0, with_report=True)
    assert skipped == 1
    assert sorted(int(i) for b in batches for i in b.index) == [0, 2]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(13, 200), st.integers(0, 100))
def test_batch_partition_property(n, budget, seed):
    c = gen_synthetic("reverse", n, 16, (1, 12), seed)
    batches = build_batches(c, budget, seed)
    assert sorted(int(i) for b in batches for i in b.index) == list(range(n))
    assert all(b.src.size <= budget and b.tgt_out.size <= budget for b in batches)


# ---------------------------------------------------------------- synthetic tasks


def test_copy_and_reverse():
    c = gen_synthetic("copy", 50, 16, (1, 9), 1)
    assert c.src == c.tgt
    r = gen_synthetic("reverse", 50, 16, (1, 9), 1)
    assert all(apply_task("reverse", t, 16) == s for s, t in zip(r.src, r.tgt))


def test_cipher_reorder_rule():
    sigma = cipher_table(32)
    a, b, c, d = 5, 9, 17, 30
    assert apply_task("cipher_reorder", [a, b, c, d], 32) == [sigma[b], sigma[a], sigma[d], sigma[c]]
    assert apply_task("cipher_reorder", [a, b, c], 32) == [sigma[b], sigma[a], sigma[c]]


def test_cipher_table_is_a_bijection_on_content_ids():
    t = cipher_table(64)
    assert t[:4].tolist() == [0, 1, 2, 3]
    assert sorted(t[4:].tolist()) == list(range(4, 64))
    assert (t == cipher_table(64)).all()


def test_swap_adjacent_is_an_involution():
    for n in range(8):
        seq = list(range(n))
        assert swap_adjacent(swap_adjacent(seq)) == seq


def test_gen_synthetic_pure_and_in_range():
    a = gen_synthetic("cipher_reorder", 200, 64, (6, 16), 5)
    b = gen_synthetic("cipher_reorder", 200, 64, (6, 16), 5)
    assert a.src == b.src and a.tgt == b.tgt
    lengths = [len(s) for s in a.src]
    assert min(lengths) >= 6 and max(lengths) <= 16
    assert min(min(s) for s in a.src + a.tgt) >= 4 and max(max(s) for s in a.src + a.tgt) < 64
    assert gen_synthetic("cipher_reorder", 200, 64, (6, 16), 6).src != a.src


def test_gen_synthetic_validation():
    with pytest.raises(ParameterError):
        gen_synthetic("copy", 5, 7)
    with pytest.raises(ParameterError):
        gen_synthetic("shuffle", 5, 16)


def test_synthetic_vocabulary_text_round_trip():
    v = synthetic_vocabulary(64)
    c = gen_synthetic("cipher_reorder", 30, 64, (2, 8), 0)
    src, tgt = corpus_to_text(c, v, v)
    back = corpus_from_text(src, tgt, v, v)
    assert back.src == c.src and back.tgt == c.tgt
    assert v.id("w4") == 4 and v.id("w63") == 63
