"""Vocabularies with reserved specials, and byte-pair-encoding subwords.

Each word is split into characters with an end-of-word marker glued to the
last one (``"low" -> l o w</w>``). Training greedily merges the most frequent
adjacent pair; ties go to the lexicographically smallest pair. Training stops
early once no pair occurs at least twice.
"""

from __future__ import annotations

import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ParameterError

PAD, EOS, BOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "</s>", "<s>", "<unk>")
EOW = "</w>"


class Vocabulary:
    """Token <-> id bijection. Ids 0-3 are PAD, EOS, BOS, UNK."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self.stoi:
            return self.stoi[token]
        if not token or any(c.isspace() for c in token):
            raise ParameterError(f"vocabulary tokens must be non-empty without whitespace: {token!r}")
        self.stoi[token] = len(self.itos)
        self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, i: int) -> str:
        return self.itos[i]

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def from_text(self, line: str) -> list[int]:
        """Whitespace tokens -> ids (unknown -> UNK)."""
        return self.ids(line.split())

    def to_text(self, ids: Iterable[int]) -> str:
        """Ids -> whitespace-joined tokens; PAD/BOS/EOS are dropped, UNK shows as ``<unk>``."""
        return " ".join(self.itos[i] for i in ids if i not in (PAD, EOS, BOS))

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(SPECIALS)]) != SPECIALS:
            raise ParameterError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(lines[len(SPECIALS) :])

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ParameterError(f"vocabulary must start with {SPECIALS}")
        return cls(itos[len(SPECIALS) :])

    @classmethod
    def from_corpus(cls, lines: Iterable[str]) -> "Vocabulary":
        """Word-level vocabulary, tokens ordered by descending frequency then text."""
        counts = Counter(tok for line in lines for tok in line.split())
        return cls(sorted(counts, key=lambda t: (-counts[t], t)))


@dataclass
class SubwordModel:
    merges: list[tuple[str, str]]
    inventory: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    def segment(self, word: str) -> tuple[str, ...]:
        """Split one whitespace-free word into subword symbols."""
        seg = self._cache.get(word)
        if seg is None:
            seg = _apply_merges(_word_symbols(word), self.ranks)
            self._cache[word] = seg
        return seg

    def segment_line(self, line: str) -> list[str]:
        return [s for w in line.split() for s in self.segment(w)]

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SubwordModel":
        merges = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split(" ")
            if len(parts) != 2:
                raise ParameterError(f"{path}:{n}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
        inventory = {c for a, b in merges for c in (a + b).replace(EOW, "")}
        return cls(merges, inventory)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i, n = 0, len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _apply_merges(symbols: tuple[str, ...], ranks: dict) -> tuple[str, ...]:
    while len(symbols) > 1:
        best = min(
            ((ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks),
            default=None,
        )
        if best is None:
            break
        symbols = _merge_word(symbols, best[1])
    return symbols


def bpe_train(lines: Iterable[str], num_merges: int) -> SubwordModel:
    """Learn up to ``num_merges`` merges from whitespace-tokenized ``lines``."""
    word_freq = Counter(w for line in lines for w in line.split())
    if not word_freq:
        raise ParameterError("bpe_train: empty corpus")
    inventory = {c for w in word_freq for c in w}
    words = [_word_symbols(w) for w in word_freq]
    freqs = [word_freq[w] for w in word_freq]

    stats: Counter = Counter()
    where: dict = defaultdict(set)
    for idx, (sym, f) in enumerate(zip(words, freqs)):
        for p in zip(sym, sym[1:]):
            stats[p] += f
            where[p].add(idx)
    heap = [(-c, p) for p, c in stats.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges and heap:
        negc, pair = heapq.heappop(heap)
        if stats.get(pair, 0) != -negc:
            continue  # stale entry
        if -negc < 2:
            break
        merges.append(pair)
        touched = set()
        for idx in sorted(where.pop(pair, ())):
            old = words[idx]
            new = _merge_word(old, pair)
            if new == old:
                continue
            f = freqs[idx]
            for p in zip(old, old[1:]):
                stats[p] -= f
                touched.add(p)
            for p in zip(new, new[1:]):
                stats[p] += f
                where[p].add(idx)
                touched.add(p)
            words[idx] = new
        stats.pop(pair, None)
        for p in touched:
            c = stats.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                stats.pop(p, None)
    return SubwordModel(merges, inventory)


def build_vocabulary(model: SubwordModel, lines: Iterable[str] = ()) -> Vocabulary:
    """Specials, every inventory character in both word-internal and word-final
    form, every merge product, then any other symbol seen in ``lines``."""
    vocab = Vocabulary()
    for c in sorted(model.inventory):
        vocab.add(c)
        vocab.add(c + EOW)
    for a, b in model.merges:
        vocab.add(a + b)
    for line in lines:
        for s in model.segment_line(line):
            vocab.add(s)
    return vocab


def bpe_encode(model: SubwordModel, vocab: Vocabulary, line: str) -> list[int]:
    """Segment and map to ids. A word containing an out-of-inventory character
    maps that character to UNK and keeps the rest character-level."""
    ids = []
    for word in line.split():
        seg = model.segment(word)
        if all(s in vocab for s in seg):
            ids.extend(vocab.stoi[s] for s in seg)
        else:
            ids.extend(vocab.id(s) if s in vocab else UNK for s in _word_symbols(word))
    return ids


def bpe_decode(vocab: Vocabulary, ids: Iterable[int]) -> str:
    """Ids -> text. PAD/BOS/EOS render as nothing; UNK renders as ``<unk>``."""
    parts = []
    for i in ids:
        if i in (PAD, EOS, BOS):
            continue
        if i == UNK:
            parts.append(SPECIALS[UNK])
        elif 0 <= i < len(vocab):
            parts.append(vocab.itos[i])
        else:
            parts.append(SPECIALS[UNK])
    text = "".join(parts).replace(EOW, " ")
    return text.strip()
