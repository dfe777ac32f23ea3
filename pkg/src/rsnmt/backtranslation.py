"""Back-translation: pseudo-parallel data from target-side monolingual text.

A reverse (target -> source) model translates monolingual target lines; each
greedy output becomes the machine source of a pseudo pair whose target is the
original human line. The pseudo pairs are concatenated with the real corpus,
shuffled, and a forward model is trained from scratch on the mix.

The pipeline keeps its artifacts in a state directory::

    reverse_ckpt/   pseudo_corpus/   mixed_corpus/   forward_ckpt/   reports/
    manifest.json   (completed stages, seeds, line counts)

and skips any stage whose manifest entry and artifacts are already present.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .bleu import BleuReport, bleu
from .data import ParallelCorpus, read_lines, write_lines
from .decoding import DecodeConfig, translate_ids
from .errors import OutOfVocabularyError, StageError
from .model import ModelConfig, ModelParams, param_count
from .subword import UNK
from .tensor import Rng
from .training import TrainConfig, load_checkpoint, train_model

log = logging.getLogger(__name__)

STAGES = ("reverse", "backtranslate", "mix", "baseline", "augmented", "evaluate")
DIRECTION = "target->source"


@dataclass
class BacktransPlan:
    """Bookkeeping for one back-translation run."""

    reverse_checkpoint: str | None
    mono_lines: int
    real_lines: int
    pseudo_lines: int = 0
    direction: str = DIRECTION
    pseudo: ParallelCorpus | None = field(default=None, repr=False)

    @property
    def ratio(self) -> float:
        return self.pseudo_lines / self.real_lines if self.real_lines else float("inf")

    def to_dict(self) -> dict:
        return {
            "reverse_checkpoint": self.reverse_checkpoint,
            "mono_lines": self.mono_lines,
            "real_lines": self.real_lines,
            "pseudo_lines": self.pseudo_lines,
            "direction": self.direction,
            "pseudo_to_real": round(self.ratio, 4) if self.real_lines else None,
        }


def backtranslate_corpus(reverse_model: ModelParams, mono, decode_config: DecodeConfig | None = None, workers=1, errors=None):
    """Pseudo corpus: source = reverse-model translation, target = the monolingual line.

    A line whose translation fails or comes out empty gets a single UNK
    source so the pseudo corpus stays line-aligned with ``mono``.
    """
    mono = [list(m) for m in mono]
    if not mono:
        return ParallelCorpus([], [], [])
    config = decode_config or DecodeConfig(beam_size=1)
    outs = translate_ids(reverse_model, mono, config, workers, errors)
    empty = sum(1 for o in outs if not o)
    if empty:
        log.warning("backtranslate: %d of %d lines came out empty; using <unk> as their source", empty, len(outs))
    src = [o if o else [UNK] for o in outs]
    return ParallelCorpus(src, mono, ["pseudo"] * len(mono))


def _check_vocab(corpus: ParallelCorpus, name: str, vocab_sizes):
    if vocab_sizes is None:
        return
    for side, lines, size in (("source", corpus.src, vocab_sizes[0]), ("target", corpus.tgt, vocab_sizes[1])):
        top = max((max(l) for l in lines), default=-1)
        if top >= size:
            raise OutOfVocabularyError(f"{name} corpus {side} side uses id {top} >= vocabulary size {size}")


def mix_corpora(real: ParallelCorpus, pseudo: ParallelCorpus, seed: int, vocab_sizes=None) -> ParallelCorpus:
    """Concatenate then shuffle with ``seed``; per-line provenance is kept.

    ``vocab_sizes`` = (source size, target size) checks both corpora fit.
    """
    _check_vocab(real, "real", vocab_sizes)
    _check_vocab(pseudo, "pseudo", vocab_sizes)
    prov = (real.provenance or ["real"] * len(real)) + (pseudo.provenance or ["pseudo"] * len(pseudo))
    joined = ParallelCorpus(real.src + pseudo.src, real.tgt + pseudo.tgt, prov)
    order = Rng(seed, 0x313).permutation(len(joined)) if len(joined) else []
    return joined.subset([int(i) for i in order])


def augmented_steps(base_steps: int, real_lines: int, mixed_lines: int, cap: float = 4.0) -> int:
    """Baseline steps scaled by the data-growth factor, capped at ``cap``x."""
    growth = mixed_lines / real_lines if real_lines else 1.0
    return max(1, int(round(base_steps * min(max(growth, 1.0), cap))))


@dataclass
class PipelineConfig:
    forward_model: ModelConfig
    train: TrainConfig
    reverse_model: ModelConfig | None = None
    reverse_train: TrainConfig | None = None
    bt_decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(beam_size=1))
    eval_decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(beam_size=4, alpha=0.6))
    seed: int = 0
    growth_cap: float = 4.0
    average_last: int = 10
    workers: int = 1

    def reverse(self) -> ModelConfig:
        if self.reverse_model is not None:
            return self.reverse_model
        f = self.forward_model
        return f.replace(
            depth=1,
            stacking="recurrent",
            src_vocab_size=f.tgt_vocab_size,
            tgt_vocab_size=f.src_vocab_size,
        )


# ---------------------------------------------------------------- state directory


def _ids_to_lines(seqs):
    return [" ".join(str(t) for t in s) for s in seqs]


def _lines_to_ids(lines):
    return [[int(t) for t in line.split()] for line in lines]


def save_corpus(directory, corpus: ParallelCorpus):
    d = Path(directory)
    write_lines(d / "src.txt", _ids_to_lines(corpus.src))
    write_lines(d / "tgt.txt", _ids_to_lines(corpus.tgt))
    if corpus.provenance is not None:
        write_lines(d / "provenance.txt", corpus.provenance)


def load_corpus(directory) -> ParallelCorpus:
    d = Path(directory)
    prov = read_lines(d / "provenance.txt") if (d / "provenance.txt").exists() else None
    return ParallelCorpus(_lines_to_ids(read_lines(d / "src.txt")), _lines_to_ids(read_lines(d / "tgt.txt")), prov)


class _State:
    def __init__(self, root, seed):
        self.root = Path(root) if root is not None else None
        self.manifest = {"seed": seed, "stages": {}}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            path = self.root / "manifest.json"
            if path.exists():
                old = json.loads(path.read_text())
                if old.get("seed") == seed:
                    self.manifest = old
                else:
                    log.warning("pipeline state seed %s != %s; starting over", old.get("seed"), seed)

    def path(self, *parts):
        return None if self.root is None else self.root.joinpath(*parts)

    def done(self, stage, *artifacts) -> bool:
        if self.root is None or stage not in self.manifest["stages"]:
            return False
        return all(self.path(a).exists() for a in artifacts)

    def mark(self, stage, **info):
        self.manifest["stages"][stage] = info
        if self.root is not None:
            tmp = self.root / "manifest.json.tmp"
            tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
            tmp.replace(self.root / "manifest.json")


def _render(ids, vocab):
    return vocab.to_text(ids) if vocab is not None else " ".join(str(t) for t in ids)


def evaluate_model(params: ModelParams, test: ParallelCorpus, config: DecodeConfig, vocab=None, workers=1) -> BleuReport:
    hyps = translate_ids(params, test.src, config, workers)
    return bleu([_render(h, vocab) for h in hyps], [_render(r, vocab) for r in test.tgt])


def pipeline_run(
    real: ParallelCorpus,
    mono,
    test: ParallelCorpus,
    config: PipelineConfig,
    state_dir=None,
    tgt_vocab=None,
    baseline: ModelParams | None = None,
    pseudo: ParallelCorpus | None = None,
):
    """Reverse model -> back-translation -> mix -> fresh forward training -> evaluation.

    Returns ``(baseline BleuReport, augmented BleuReport, BacktransPlan)``.
    Passing an already trained ``baseline`` or a ready ``pseudo`` corpus (from
    an earlier run's plan) skips those stages. Any failure is
    re-raised as ``StageError`` naming the stage.
    """
    state = _State(state_dir, config.seed)
    seed = config.seed
    mono = [list(m) for m in mono]

    def stage(name, fn):
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:
            log.error("pipeline stage %s failed: %s", name, exc)
            raise StageError(name, exc) from exc

    def train_or_load(name, subdir, model_cfg, corpus, tc, stage_seed):
        ckpt = Path(subdir) / "averaged.rsnmt"
        if state.done(name, ckpt):
            log.info("pipeline: reusing %s", state.path(ckpt))
            return load_checkpoint(state.path(ckpt)).to_params(requires_grad=False)
        out = state.path(subdir)
        params, report = train_model(
            model_cfg, corpus, tc, seed=stage_seed, out_dir=out, average_last=config.average_last
        )
        state.mark(name, seed=stage_seed, steps=tc.total_steps, lines=len(corpus), final_loss=report.final_loss)
        return params

    # 1. reverse model on the flipped real corpus
    reverse_cfg = config.reverse()
    reverse_tc = config.reverse_train or config.train
    flipped = ParallelCorpus(real.tgt, real.src)
    if pseudo is None:
        reverse = stage(
            "reverse", lambda: train_or_load("reverse", "reverse_ckpt", reverse_cfg, flipped, reverse_tc, seed + 1)
        )

    # 2. back-translate
    def do_bt():
        if state.done("backtranslate", "pseudo_corpus/src.txt", "pseudo_corpus/tgt.txt"):
            return load_corpus(state.path("pseudo_corpus"))
        errors = []
        pseudo = backtranslate_corpus(reverse, mono, config.bt_decode, config.workers, errors)
        if state.root is not None:
            save_corpus(state.path("pseudo_corpus"), pseudo)
        state.mark("backtranslate", lines=len(pseudo), failed_lines=len(errors), direction=DIRECTION)
        return pseudo

    if pseudo is None:
        pseudo = stage("backtranslate", do_bt)
    elif len(pseudo) != len(mono):
        raise StageError("backtranslate", ValueError("supplied pseudo corpus does not match the monolingual corpus"))

    # 3. mix
    def do_mix():
        if state.done("mix", "mixed_corpus/src.txt", "mixed_corpus/tgt.txt"):
            return load_corpus(state.path("mixed_corpus"))
        mixed = mix_corpora(
            real,
            pseudo,
            seed,
            (config.forward_model.src_vocab_size, config.forward_model.tgt_vocab_size),
        )
        if state.root is not None:
            save_corpus(state.path("mixed_corpus"), mixed)
        state.mark("mix", real=len(real), pseudo=len(pseudo), total=len(mixed))
        return mixed

    mixed = stage("mix", do_mix)
    plan = BacktransPlan(
        str(state.path("reverse_ckpt", "averaged.rsnmt")) if state.root is not None else None,
        len(mono),
        len(real),
        len(pseudo),
        pseudo=pseudo,
    )

    # 4. forward baseline and 5. forward augmented, both from the same fresh init seed
    fwd = config.forward_model
    if baseline is None:
        baseline = stage(
            "baseline", lambda: train_or_load("baseline", "forward_ckpt/baseline", fwd, real, config.train, seed)
        )
    aug_tc = TrainConfig.from_dict(
        {**config.train.to_dict(), "total_steps": augmented_steps(config.train.total_steps, len(real), len(mixed), config.growth_cap)}
    )
    augmented = stage(
        "augmented", lambda: train_or_load("augmented", "forward_ckpt/augmented", fwd, mixed, aug_tc, seed)
    )
    assert param_count(baseline.config) == param_count(augmented.config)

    # 6. evaluate on the same test set
    def do_eval():
        base = evaluate_model(baseline, test, config.eval_decode, tgt_vocab, config.workers)
        aug = evaluate_model(augmented, test, config.eval_decode, tgt_vocab, config.workers)
        if state.root is not None:
            write_lines(state.path("reports", "baseline.tsv"), base.to_tsv().splitlines())
            write_lines(state.path("reports", "augmented.tsv"), aug.to_tsv().splitlines())
            write_lines(state.path("reports", "plan.json"), [json.dumps(plan.to_dict(), indent=2)])
        state.mark("evaluate", baseline_bleu=base.bleu, augmented_bleu=aug.bleu, augmented_steps=aug_tc.total_steps)
        return base, aug

    base, aug = stage("evaluate", do_eval)
    log.info("back-translation: baseline %.2f -> augmented %.2f BLEU", base.bleu, aug.bleu)
    return base, aug, plan
