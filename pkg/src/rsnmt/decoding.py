"""Greedy and beam-search decoding, with optional recurrence-depth override.

Beam search ranks hypotheses by ``log p / ((5 + len) / 6) ** alpha``, where
``len`` counts generated tokens including a final EOS. At each step the live
hypotheses are expanded over the whole vocabulary and the ``beam_size`` best
candidates kept; candidates ending in EOS move to the finished set. Search
stops when no live hypothesis can still beat the best finished one, or at
``max_len`` (where live hypotheses are closed as truncated).

PAD and BOS are never generated.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import BOS, EOS, PAD, IncrementalDecoder, ModelParams, encode
from .subword import Vocabulary
from .tensor import no_grad

log = logging.getLogger(__name__)

CHUNK = 64


@dataclass
class DecodeConfig:
    beam_size: int = 4
    alpha: float = 0.6
    max_len: int | None = None
    depth_override: int | None = None

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    def max_len_for(self, src_len: int) -> int:
        return self.max_len if self.max_len is not None else 2 * src_len + 10


@dataclass
class Hypothesis:
    tokens: list = field(default_factory=lambda: [BOS])
    logprob: float = 0.0
    finished: bool = False
    truncated: bool = False

    @property
    def output(self) -> list[int]:
        """Generated ids without BOS and without the closing EOS."""
        out = self.tokens[1:]
        return out[:-1] if self.finished and out and out[-1] == EOS else out

    @property
    def length(self) -> int:
        return len(self.tokens) - 1


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def penalized(logprob: float, length: int, alpha: float) -> float:
    return logprob / length_penalty(max(length, 1), alpha)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out[..., PAD] = -np.inf
    out[..., BOS] = -np.inf
    return out


def _encode_batch(params: ModelParams, srcs, depth_override):
    width = max(len(s) for s in srcs) + 1
    src = np.full((len(srcs), width), PAD, dtype=np.int64)
    for i, s in enumerate(srcs):
        src[i, : len(s) + 1] = [*s, EOS]
    enc = encode(src, params, depth_override).data
    return src, enc


def greedy_decode_batch(params: ModelParams, srcs, config: DecodeConfig | None = None) -> list[Hypothesis]:
    """Argmax decoding of several sources at once; ties go to the lowest id."""
    config = config or DecodeConfig(beam_size=1)
    if not srcs:
        return []
    with no_grad():
        src, enc = _encode_batch(params, srcs, config.depth_override)
        dec = IncrementalDecoder(params, enc, src, config.depth_override)
        n = len(srcs)
        limits = np.array([config.max_len_for(len(s)) for s in srcs])
        hyps = [Hypothesis() for _ in range(n)]
        live = np.arange(n)
        last = np.full(n, BOS, dtype=np.int64)
        for t in range(int(limits.max())):
            logp = _log_softmax(dec.step(last))
            best = logp.argmax(axis=-1)
            keep = []
            for row, i in enumerate(live):
                h = hyps[i]
                h.tokens.append(int(best[row]))
                h.logprob += float(logp[row, best[row]])
                if best[row] == EOS:
                    h.finished = True
                elif h.length >= limits[i]:
                    h.truncated = True
                else:
                    keep.append(row)
            if not keep:
                break
            keep = np.asarray(keep)
            live = live[keep]
            last = best[keep]
            dec.reorder(keep)
    return hyps


def greedy_decode(params: ModelParams, src_ids, config: DecodeConfig | None = None) -> list[int]:
    return greedy_decode_batch(params, [list(src_ids)], config)[0].output


def beam_search(params: ModelParams, src_ids, config: DecodeConfig) -> Hypothesis:
    """Best hypothesis for one source sentence."""
    k, alpha = config.beam_size, config.alpha
    max_len = config.max_len_for(len(src_ids))
    with no_grad():
        src, enc = _encode_batch(params, [list(src_ids)], config.depth_override)
        dec = IncrementalDecoder(params, enc, src, config.depth_override)
        live_tokens = [[BOS]]
        live_scores = np.zeros(1)
        finished: list[Hypothesis] = []
        best_finished = -np.inf
        for t in range(1, max_len + 1):
            last = np.array([toks[-1] for toks in live_tokens], dtype=np.int64)
            logp = _log_softmax(dec.step(last))
            cand = (live_scores[:, None] + logp).reshape(-1)
            n_ok = int(np.isfinite(cand).sum())
            take = min(k, n_ok)
            # all live hypotheses share a length, so raw log-prob ranks them
            order = np.argsort(-cand, kind="stable")[:take]
            v = logp.shape[1]
            next_tokens, next_scores, origins = [], [], []
            for flat in order:
                origin, tok = divmod(int(flat), v)
                toks = live_tokens[origin] + [tok]
                score = float(cand[flat])
                if tok == EOS or t == max_len:
                    h = Hypothesis(toks, score, finished=tok == EOS, truncated=tok != EOS)
                    finished.append(h)
                    best_finished = max(best_finished, penalized(score, t, alpha))
                else:
                    next_tokens.append(toks)
                    next_scores.append(score)
                    origins.append(origin)
            if not next_tokens:
                break
            live_tokens = next_tokens
            live_scores = np.array(next_scores)
            # log-probs only fall and (for alpha >= 0) the penalty grows with
            # length, so live/lp(max_len) bounds any continuation
            bound = live_scores.max() / length_penalty(max_len, alpha) if alpha >= 0 else np.inf
            if finished and best_finished >= bound:
                break
            dec.reorder(np.asarray(origins))
        finished.sort(key=lambda h: -penalized(h.logprob, h.length, alpha))
        return finished[0]


def beam_decode(params: ModelParams, src_ids, config: DecodeConfig) -> tuple[list[int], float]:
    """Best token ids and their penalized score."""
    h = beam_search(params, src_ids, config)
    return h.output, penalized(h.logprob, h.length, config.alpha)


def decode_many(params: ModelParams, srcs, config: DecodeConfig, batch_size: int = 64) -> list[list[int]]:
    if config.beam_size == 1:
        out = []
        for i in range(0, len(srcs), batch_size):
            out += [h.output for h in greedy_decode_batch(params, srcs[i : i + batch_size], config)]
        return out
    return [beam_search(params, s, config).output for s in srcs]


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("RSNMT_THREADS", "0") or 0)
    n = requested or 1
    return max(1, min(n, cap) if cap > 0 else n)


def translate_ids(params: ModelParams, srcs, config: DecodeConfig, workers: int = 1, errors=None) -> list[list[int]]:
    """Order-preserving translation of id sequences over disjoint shards.

    A sentence that fails to decode yields ``[]`` and an entry in ``errors``
    (a list, if given); the rest of the corpus is unaffected.
    """
    srcs = [list(s) for s in srcs]
    if not srcs:
        return []
    workers = worker_count(workers)
    # shards are made of whole CHUNK-line blocks so batch composition, and
    # therefore every float result, is independent of the worker count
    blocks = [(i, srcs[i : i + CHUNK]) for i in range(0, len(srcs), CHUNK)]
    per = max(1, -(-len(blocks) // workers))
    shards = [blocks[i : i + per] for i in range(0, len(blocks), per)]

    def run_block(start, chunk):
        try:
            return decode_many(params, chunk, config, batch_size=CHUNK)
        except Exception:  # fall back to one sentence at a time
            out = []
            for j, s in enumerate(chunk):
                try:
                    out += decode_many(params, [s], config)
                except Exception as exc:
                    log.error("line %d failed to decode: %s", start + j, exc)
                    if errors is not None:
                        errors.append((start + j, repr(exc)))
                    out.append([])
            return out

    def run(shard):
        return [ids for start, chunk in shard for ids in run_block(start, chunk)]

    if workers == 1:
        results = [run(s) for s in shards]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, shards))
    return [ids for chunk in results for ids in chunk]


def translate_corpus(
    params: ModelParams,
    lines,
    config: DecodeConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    workers: int = 1,
    errors=None,
    encode_line=None,
    decode_ids=None,
) -> list[str]:
    """Translate text lines; output line i is the translation of input line i.

    ``encode_line`` / ``decode_ids`` default to whitespace tokens through the
    vocabularies; pass subword functions to translate raw text.
    """
    encode_line = encode_line or src_vocab.from_text
    decode_ids = decode_ids or tgt_vocab.to_text
    outs = translate_ids(params, [encode_line(line) for line in lines], config, workers, errors)
    return [decode_ids(ids) for ids in outs]
