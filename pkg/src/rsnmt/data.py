"""Parallel corpora, token-budget batching and synthetic translation tasks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .subword import BOS, EOS, PAD, Vocabulary
from .tensor import Rng

log = logging.getLogger(__name__)

TASKS = ("copy", "reverse", "cipher_reorder")
N_SPECIALS = 4


@dataclass
class ParallelCorpus:
    """Line-aligned source/target id sequences.

    ``provenance`` is optional per-line bookkeeping ("real" / "pseudo") kept
    through mixing and shuffling.
    """

    src: list
    tgt: list
    provenance: list | None = None

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ParameterError(f"corpus sides differ in length: {len(self.src)} vs {len(self.tgt)}")
        for i, (s, t) in enumerate(zip(self.src, self.tgt)):
            if len(s) == 0 or len(t) == 0:
                raise ParameterError(f"corpus line {i} is empty")
        if self.provenance is not None and len(self.provenance) != len(self.src):
            raise ParameterError("provenance length does not match corpus length")

    def __len__(self):
        return len(self.src)

    def subset(self, index) -> "ParallelCorpus":
        prov = None if self.provenance is None else [self.provenance[i] for i in index]
        return ParallelCorpus([self.src[i] for i in index], [self.tgt[i] for i in index], prov)

    def split(self, *sizes: int) -> list["ParallelCorpus"]:
        out, start = [], 0
        for n in sizes:
            out.append(self.subset(range(start, start + n)))
            start += n
        return out

    def num_tokens(self) -> int:
        return sum(len(s) for s in self.src) + sum(len(t) for t in self.tgt)


@dataclass
class Batch:
    """Padded batch. ``tgt_in`` is BOS + target, ``tgt_out`` is target + EOS.

    Sources also end in EOS. ``src_mask`` / ``tgt_mask`` are True exactly at
    non-PAD positions.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_out != PAD

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def padded_tokens(self) -> int:
        return self.src.shape[0] * max(self.src.shape[1], self.tgt_in.shape[1])

    @property
    def target_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def pad_sequences(seqs: Sequence[Sequence[int]], prefix=(), suffix=()) -> np.ndarray:
    width = max(len(s) for s in seqs) + len(prefix) + len(suffix)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        row = [*prefix, *s, *suffix]
        out[i, : len(row)] = row
    return out


def make_batch(src: Sequence[Sequence[int]], tgt: Sequence[Sequence[int]], index=None) -> Batch:
    return Batch(
        src=pad_sequences(src, suffix=(EOS,)),
        tgt_in=pad_sequences(tgt, prefix=(BOS,)),
        tgt_out=pad_sequences(tgt, suffix=(EOS,)),
        index=np.asarray(index if index is not None else range(len(src)), dtype=np.int64),
    )


def _cost(corpus: ParallelCorpus, i: int) -> int:
    # one extra slot for the EOS/BOS every side carries
    return max(len(corpus.src[i]), len(corpus.tgt[i])) + 1


def build_batches(corpus: ParallelCorpus, token_budget: int, seed: int, with_report: bool = False):
    """Length-bucketed batches whose padded size (rows x longest side) fits ``token_budget``.

    Sentences are shuffled by ``seed``, stably sorted by length, cut into
    batches greedily, then the batch order is shuffled. Every sentence lands in
    exactly one batch except those longer than the budget, which are skipped
    and counted.
    """
    rng = Rng(seed, 0xBA7C)
    order = rng.permutation(len(corpus))
    costs = np.array([_cost(corpus, i) for i in range(len(corpus))], dtype=np.int64)
    order = order[np.argsort(costs[order], kind="stable")]
    skipped = 0
    groups: list[list[int]] = []
    current: list[int] = []
    longest = 0
    for i in order:
        c = int(costs[i])
        if c > token_budget:
            skipped += 1
            continue
        new_longest = max(longest, c)
        if current and new_longest * (len(current) + 1) > token_budget:
            groups.append(current)
            current, new_longest = [], c
        current.append(int(i))
        longest = new_longest
    if current:
        groups.append(current)
    if skipped:
        log.warning("build_batches: skipped %d sentence(s) longer than the %d-token budget", skipped, token_budget)
    perm = rng.permutation(len(groups))
    batches = [
        make_batch([corpus.src[i] for i in groups[g]], [corpus.tgt[i] for i in groups[g]], groups[g]) for g in perm
    ]
    return (batches, skipped) if with_report else batches


# ---------------------------------------------------------------- synthetic tasks


def cipher_table(vocab_size: int) -> np.ndarray:
    """Fixed bijection over content ids; depends on ``vocab_size`` only."""
    table = np.arange(vocab_size, dtype=np.int64)
    content = np.arange(N_SPECIALS, vocab_size)
    table[N_SPECIALS:] = content[Rng(vocab_size, 0xC1F).permutation(len(content))]
    return table


def swap_adjacent(seq: Sequence[int]) -> list[int]:
    """Swap the pairs starting at even indices; an odd tail stays in place."""
    out = list(seq)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def apply_task(task: str, src: Sequence[int], vocab_size: int, table=None) -> list[int]:
    if task == "copy":
        return list(src)
    if task == "reverse":
        return list(reversed(src))
    if task == "cipher_reorder":
        table = cipher_table(vocab_size) if table is None else table
        return swap_adjacent([int(table[t]) for t in src])
    raise ParameterError(f"unknown task {task!r}; expected one of {TASKS}")


def gen_synthetic(task: str, n_pairs: int, vocab_size: int, len_range=(4, 12), seed: int = 0) -> ParallelCorpus:
    """Random source sentences over the content ids and their task-defined targets.

    A pure function of its arguments. Content ids are ``4 .. vocab_size-1``;
    lengths are uniform on the inclusive ``len_range``.
    """
    if task not in TASKS:
        raise ParameterError(f"unknown task {task!r}; expected one of {TASKS}")
    if vocab_size < 8:
        raise ParameterError(f"vocab_size must be >= 8, got {vocab_size}")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ParameterError(f"bad len_range {len_range}")
    rng = Rng(seed, 0x5E7)
    table = cipher_table(vocab_size)
    lengths = rng.integers(lo, hi + 1, size=n_pairs)
    src, tgt = [], []
    for n in lengths:
        s = [int(t) for t in rng.integers(N_SPECIALS, vocab_size, size=int(n))]
        src.append(s)
        tgt.append(apply_task(task, s, vocab_size, table))
    return ParallelCorpus(src, tgt)


def synthetic_vocabulary(vocab_size: int) -> Vocabulary:
    """Word-level vocabulary whose ids coincide with synthetic token ids (``w4``, ``w5``, ...)."""
    return Vocabulary([f"w{i}" for i in range(N_SPECIALS, vocab_size)])


# ---------------------------------------------------------------- files


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def write_lines(path, lines) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def corpus_to_text(corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    return [src_vocab.to_text(s) for s in corpus.src], [tgt_vocab.to_text(t) for t in corpus.tgt]


def corpus_from_text(src_lines, tgt_lines, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> ParallelCorpus:
    if len(src_lines) != len(tgt_lines):
        raise ParameterError(f"parallel files differ in line count: {len(src_lines)} vs {len(tgt_lines)}")
    return ParallelCorpus([src_vocab.from_text(s) for s in src_lines], [tgt_vocab.from_text(t) for t in tgt_lines])
