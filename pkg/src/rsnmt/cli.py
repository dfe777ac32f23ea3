"""Command-line interface: ``rsnmt <subcommand> [options]``.

Every subcommand writes under ``--out`` together with a ``manifest.json``
listing the artifacts it produced; the exit status is nonzero iff a requested
artifact is missing.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .backtranslation import PipelineConfig, pipeline_run
from .bleu import bleu
from .data import TASKS, ParallelCorpus, gen_synthetic, read_lines, synthetic_vocabulary, write_lines
from .decoding import DecodeConfig, translate_corpus
from .errors import ConfigError, RsnmtError
from .experiments import RunConfig, params_report, table1, table2, table3
from .subword import SubwordModel, Vocabulary, bpe_decode, bpe_encode, bpe_train, build_vocabulary
from .training import average_checkpoints, load_checkpoint, save_checkpoint, train_model

log = logging.getLogger("rsnmt")


class Outputs:
    """Tracks requested artifacts and writes the run manifest."""

    def __init__(self, out_dir, command, args):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.args = {k: v for k, v in vars(args).items() if k != "func"}
        self.requested: list[Path] = []

    def path(self, name) -> Path:
        p = self.dir / name
        self.requested.append(p)
        return p

    def finish(self, **extra) -> int:
        missing = [str(p) for p in self.requested if not p.exists()]
        manifest = {
            "command": self.command,
            "version": __version__,
            "args": self.args,
            "artifacts": [str(p) for p in self.requested if p.exists()],
            "missing": missing,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
            **extra,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
        for m in missing:
            log.error("artifact not produced: %s", m)
        return 1 if missing else 0


def _run_config(args) -> RunConfig:
    d = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    model = dict(d.get("model", {}))
    if getattr(args, "depth", None) is not None:
        model["depth"] = args.depth
    if getattr(args, "stacking", None) is not None:
        model["stacking"] = args.stacking
    d["model"] = model
    decode = dict(d.get("decode", {"beam_size": 4, "alpha": 0.6}))
    if getattr(args, "beam", None) is not None:
        decode["beam_size"] = args.beam
    if getattr(args, "alpha", None) is not None:
        decode["alpha"] = args.alpha
    if getattr(args, "decode_depth", None) is not None:
        decode["depth_override"] = args.decode_depth
    d["decode"] = decode
    if getattr(args, "seed", None) is not None:
        d["seeds"] = [args.seed] if getattr(args, "command", "") != "experiment" else d.get("seeds", [args.seed])
    if getattr(args, "workers", None) is not None:
        d["workers"] = args.workers
    if getattr(args, "out", None) is not None:
        d["out"] = args.out
    return RunConfig.from_dict(d)


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise ConfigError(f"missing required option --{n.replace('_', '-')}")


def _vocab_and_codec(args, side):
    """Vocabulary plus line encode/decode functions for one side (src or tgt)."""
    vocab_path = getattr(args, f"{side}_vocab")
    vocab = Vocabulary.load(vocab_path)
    codes = getattr(args, "bpe", None)
    if codes:
        model = SubwordModel.load(codes)
        return vocab, (lambda line: bpe_encode(model, vocab, line)), (lambda ids: bpe_decode(vocab, ids))
    return vocab, vocab.from_text, vocab.to_text


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, out: Outputs):
    vocab = synthetic_vocabulary(args.vocab_size)
    corpus = gen_synthetic(args.task, args.n_pairs, args.vocab_size, (args.min_len, args.max_len), args.seed or 0)
    write_lines(out.path(f"{args.prefix}.src"), [vocab.to_text(s) for s in corpus.src])
    write_lines(out.path(f"{args.prefix}.tgt"), [vocab.to_text(t) for t in corpus.tgt])
    vocab.save(out.path("vocab.txt"))
    return out.finish(task=args.task, n_pairs=args.n_pairs)


def cmd_bpe_train(args, out: Outputs):
    _require(args, "input")
    lines = [l for path in args.input for l in read_lines(path)]
    model = bpe_train(lines, args.merges)
    model.save(out.path("bpe.codes"))
    build_vocabulary(model, lines).save(out.path("vocab.txt"))
    return out.finish(merges_learned=len(model.merges))


def cmd_bpe_apply(args, out: Outputs):
    _require(args, "input", "bpe")
    model = SubwordModel.load(args.bpe)
    segmented = [" ".join(model.segment_line(line)) for line in read_lines(args.input)]
    write_lines(out.path(Path(args.input).name + ".bpe"), segmented)
    return out.finish()


def cmd_train(args, out: Outputs):
    run = _run_config(args)
    seed = run.seeds[0]
    if args.src and args.tgt:
        _require(args, "src_vocab", "tgt_vocab")
        sv, enc_src, _ = _vocab_and_codec(args, "src")
        tv, enc_tgt, _ = _vocab_and_codec(args, "tgt")
        src_lines, tgt_lines = read_lines(args.src), read_lines(args.tgt)
        corpus = ParallelCorpus([enc_src(l) for l in src_lines], [enc_tgt(l) for l in tgt_lines])
        model_cfg = run.model_config(**{"src_vocab_size": len(sv), "tgt_vocab_size": len(tv), **run.model})
    else:
        corpus, _ = run.data()
        model_cfg = run.model_config()
    (out.dir / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2))
    params, report = train_model(
        model_cfg, corpus, run.train_config(), seed=seed, out_dir=out.dir, meta={"seed": seed},
        progress=lambda r: log.info("step %d loss %.4f lr %.6f", r.step, r.loss, r.lr),
    )
    out.path("averaged.rsnmt")
    out.path("train_log.tsv")
    return out.finish(final_loss=report.final_loss, steps=run.train_config().total_steps)


def _load_params(path):
    return load_checkpoint(path).to_params(requires_grad=False)


def cmd_translate(args, out: Outputs):
    _require(args, "checkpoint", "input", "src_vocab", "tgt_vocab")
    params = _load_params(args.checkpoint)
    sv, enc, _ = _vocab_and_codec(args, "src")
    tv, _, dec = _vocab_and_codec(args, "tgt")
    config = DecodeConfig(
        beam_size=args.beam or 4, alpha=0.6 if args.alpha is None else args.alpha, depth_override=args.decode_depth
    )
    errors = []
    hyps = translate_corpus(params, read_lines(args.input), config, sv, tv, args.workers or 1, errors, enc, dec)
    write_lines(out.path(Path(args.input).name + ".hyp"), hyps)
    return out.finish(failed_lines=errors)


def cmd_evaluate(args, out: Outputs):
    _require(args, "hyp", "ref")
    report = bleu(read_lines(args.hyp), read_lines(args.ref))
    out.path("bleu.tsv").write_text(report.to_tsv())
    sys.stdout.write(report.to_tsv())
    print(report.summary())
    return out.finish(bleu=report.bleu)


def cmd_average_ckpt(args, out: Outputs):
    _require(args, "checkpoints")
    ckpts = [load_checkpoint(p) for p in args.checkpoints[-args.last :]]
    save_checkpoint(out.path(args.name), average_checkpoints(ckpts))
    return out.finish(averaged=[str(p) for p in args.checkpoints[-args.last :]])


def cmd_params(args, out: Outputs):
    text = params_report(args.d_model, args.d_ff, args.depth or 6, args.vocab_size, args.sharing, args.heads)
    sys.stdout.write(text)
    out.path("params.tsv").write_text(text)
    return out.finish()


def cmd_backtranslate(args, out: Outputs):
    run = _run_config(args)
    vocab = synthetic_vocabulary(run.vocab_size)
    full = gen_synthetic(run.task, run.n_train + run.n_test, run.vocab_size, run.len_range, run.data_seed)
    real, test = full.split(run.bt_real_lines, run.n_test)
    mono = gen_synthetic(run.task, run.mono_lines, run.vocab_size, run.len_range, run.data_seed + 7919).tgt
    pc = PipelineConfig(
        forward_model=run.model_config(),
        train=run.train_config(**run.bt_train),
        reverse_train=run.train_config(**run.bt_reverse_train),
        eval_decode=run.decode_config(),
        seed=run.seeds[0],
        workers=run.workers,
    )
    base, aug, plan = pipeline_run(real, mono, test, pc, out.dir, vocab)
    out.path("reports/baseline.tsv")
    out.path("reports/augmented.tsv")
    print(f"baseline\t{base.bleu:.2f}\naugmented\t{aug.bleu:.2f}")
    return out.finish(plan=plan.to_dict())


def cmd_experiment(args, out: Outputs):
    run = _run_config(args)
    (out.dir / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2))
    grids = []
    if args.table == "table1":
        grids.append(("table1", table1(run, out.dir)))
    elif args.table == "table2":
        grids.append(("table2", table2(run, out.dir)))
    else:
        grids.append(("table3", table3(run, out.dir)))
    for stem, grid in grids:
        grid.write(out.dir, stem)
        out.path(f"{stem}.tsv")
        out.path(f"{stem}.txt")
        print(grid.to_text())
    status = out.finish(complete=all(g.complete() for _, g in grids))
    return status


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--depth", type=int)
    common.add_argument("--stacking", choices=["vanilla", "recurrent"])
    common.add_argument("--decode-depth", type=int, dest="decode_depth")
    common.add_argument("--beam", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rsnmt", description="Recurrently stacked Transformer NMT toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic parallel corpus")
    s.add_argument("--task", choices=TASKS, default="cipher_reorder")
    s.add_argument("--n-pairs", type=int, default=10_000, dest="n_pairs")
    s.add_argument("--vocab-size", type=int, default=64, dest="vocab_size")
    s.add_argument("--min-len", type=int, default=6, dest="min_len")
    s.add_argument("--max-len", type=int, default=16, dest="max_len")
    s.add_argument("--prefix", default="train")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("bpe-train", parents=[common], help="learn BPE merges")
    s.add_argument("--input", nargs="+")
    s.add_argument("--merges", type=int, default=16000)
    s.set_defaults(func=cmd_bpe_train)

    s = sub.add_parser("bpe-apply", parents=[common], help="segment a text file")
    s.add_argument("--input")
    s.add_argument("--bpe")
    s.set_defaults(func=cmd_bpe_apply)

    for name, func, helptext in (
        ("train", cmd_train, "train a model (synthetic task unless --src/--tgt given)"),
        ("translate", cmd_translate, "translate a file with a checkpoint"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--src")
        s.add_argument("--tgt")
        s.add_argument("--input")
        s.add_argument("--checkpoint")
        s.add_argument("--src-vocab", dest="src_vocab")
        s.add_argument("--tgt-vocab", dest="tgt_vocab")
        s.add_argument("--bpe", help="BPE codes shared by both sides")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", parents=[common], help="corpus BLEU of a hypothesis file")
    s.add_argument("--hyp")
    s.add_argument("--ref")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("average-ckpt", parents=[common], help="average the last k checkpoints")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--last", type=int, default=10)
    s.add_argument("--name", default="averaged.rsnmt")
    s.set_defaults(func=cmd_average_ckpt)

    s = sub.add_parser("params", parents=[common], help="parameter inventory and counts")
    s.add_argument("--d-model", type=int, default=512, dest="d_model")
    s.add_argument("--d-ff", type=int, default=2048, dest="d_ff")
    s.add_argument("--heads", type=int, default=8)
    s.add_argument("--vocab-size", type=int, default=32000, dest="vocab_size")
    s.add_argument("--sharing", default="joint_all_tied", choices=["separate", "tgt_softmax_tied", "joint_all_tied"])
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("backtranslate", parents=[common], help="run the back-translation pipeline once")
    s.set_defaults(func=cmd_backtranslate)

    s = sub.add_parser("experiment", parents=[common], help="run a result grid")
    s.add_argument("table", choices=["table1", "table2", "table3"])
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    out = Outputs(args.out, args.command, args)
    try:
        return args.func(args, out)
    except RsnmtError as exc:
        log.error("%s", exc)
        out.finish(error=str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
