"""Experiment grids over the synthetic task, and the parameter-count report.

``RunConfig`` is the complete, JSON-serializable description of a run; grids
are pure functions of it plus the seeds it lists.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backtranslation import PipelineConfig, evaluate_model, pipeline_run
from .data import gen_synthetic, synthetic_vocabulary
from .decoding import DecodeConfig, worker_count
from .errors import ConfigError
from .model import ModelConfig, layer_pair_count, param_count, parameter_shapes
from .training import TrainConfig, train_model

log = logging.getLogger(__name__)

PUBLISHED_VANILLA6 = 158_894_599
PUBLISHED_RECURRENT = 48_640_519


@dataclass
class RunConfig:
    task: str = "cipher_reorder"
    n_train: int = 10_000
    n_test: int = 500
    vocab_size: int = 64
    len_range: tuple = (6, 16)
    data_seed: int = 1234
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    max_depth: int = 4
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    decode: dict = field(default_factory=lambda: {"beam_size": 4, "alpha": 0.6})
    mono_lines: int = 30_000
    bt_real_lines: int = 7_700
    bt_depths: list = field(default_factory=lambda: [1, 2])
    bt_train: dict = field(default_factory=lambda: {"total_steps": 400})
    bt_reverse_train: dict = field(default_factory=lambda: {"total_steps": 800})
    workers: int = 1
    cell_workers: int = 1  # grid cells trained concurrently (threads)
    out: str = "runs"

    def __post_init__(self):
        self.len_range = tuple(self.len_range)
        self.model_config()
        self.train_config()
        self.decode_config()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown RunConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["len_range"] = list(self.len_range)
        return d

    def model_config(self, **overrides) -> ModelConfig:
        base = {"src_vocab_size": self.vocab_size, "tgt_vocab_size": self.vocab_size}
        return ModelConfig.from_dict({**base, **self.model, **overrides})

    def train_config(self, **overrides) -> TrainConfig:
        base = {"total_steps": 1200}
        return TrainConfig.from_dict({**base, **self.train, **overrides})

    def decode_config(self, **overrides) -> DecodeConfig:
        return DecodeConfig(**{**self.decode, **overrides})

    def data(self):
        """(train, test) corpora; the test split is identical for every cell."""
        full = gen_synthetic(self.task, self.n_train + self.n_test, self.vocab_size, self.len_range, self.data_seed)
        train, test = full.split(self.n_train, self.n_test)
        return train, test


# ---------------------------------------------------------------- grids


@dataclass
class Grid:
    title: str
    row_label: str
    rows: list
    cols: list
    cells: dict = field(default_factory=dict)  # (row, col) -> float | None
    marked: set = field(default_factory=set)
    notes: list = field(default_factory=list)

    def set(self, row, col, value):
        self.cells[(row, col)] = value

    def get(self, row, col):
        return self.cells.get((row, col))

    def _fmt(self, row, col):
        v = self.get(row, col)
        return "NA" if v is None else f"{v:.2f}"

    def to_tsv(self) -> str:
        lines = ["\t".join([self.row_label, *map(str, self.cols)])]
        for r in self.rows:
            lines.append("\t".join([str(r), *(self._fmt(r, c) for c in self.cols)]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = [self.row_label, *map(str, self.cols)]
        body = [[str(r), *((self._fmt(r, c) + ("*" if (r, c) in self.marked else "")) for c in self.cols)] for r in self.rows]
        widths = [max(len(row[i]) for row in [head, *body]) for i in range(len(head))]
        fmt = lambda row: "  ".join(cell.rjust(w) for cell, w in zip(row, widths))
        out = [self.title, fmt(head), *(fmt(r) for r in body)]
        if self.marked:
            out.append("(* = trained depth)")
        return "\n".join(out + self.notes) + "\n"

    def complete(self) -> bool:
        return all(self.get(r, c) is not None for r in self.rows for c in self.cols)

    def write(self, out_dir, stem) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.tsv", out / f"{stem}.txt"]
        paths[0].write_text(self.to_tsv())
        paths[1].write_text(self.to_text())
        return paths


def median_or_none(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


def _model_label(stacking, depth):
    return f"{stacking}-{depth}"


def train_cell(run: RunConfig, train, stacking, depth, seed, out_dir=None):
    cfg = run.model_config(stacking=stacking, depth=depth)
    t0 = time.perf_counter()
    params, report = train_model(cfg, train, run.train_config(), seed=seed, out_dir=out_dir)
    log.info("trained %s seed %d in %.0fs (loss %.3f)", _model_label(stacking, depth), seed, time.perf_counter() - t0, report.final_loss)
    return params


def _run_cells(jobs, n):
    """Call each job; with ``n`` > 1 on a thread pool. Results keep job order."""
    n = worker_count(n)
    if n == 1 or len(jobs) < 2:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda job: job(), jobs))


def _safe(fn, what, failures):
    try:
        return fn()
    except Exception as exc:  # a failed cell becomes NA; the grid carries on
        log.error("%s failed: %s", what, exc)
        failures.append((what, repr(exc)))
        return None


def table1(run: RunConfig, out_dir=None, keep_models=False, models=None):
    """BLEU for recurrent 1..K and vanilla K, per seed plus the median.

    ``models`` restricts the rows to a list of ``(stacking, depth)``.
    """
    train, test = run.data()
    vocab = synthetic_vocabulary(run.vocab_size)
    if models is None:
        models = [("recurrent", k) for k in range(1, run.max_depth + 1)] + [("vanilla", run.max_depth)]
    cols = [f"seed{s}" for s in run.seeds] + ["median"]
    grid = Grid("BLEU by stacking and depth", "model", [_model_label(*m) for m in models], cols)
    failures, trained = [], {}
    cells = [(stacking, depth, seed) for stacking, depth in models for seed in run.seeds]

    def job(stacking, depth, seed):
        label = _model_label(stacking, depth)
        cell_dir = None if out_dir is None else Path(out_dir) / "models" / f"{label}-seed{seed}"

        def cell():
            params = train_cell(run, train, stacking, depth, seed, cell_dir)
            if keep_models:
                trained[(label, seed)] = params
            return evaluate_model(params, test, run.decode_config(), vocab, run.workers).bleu

        return _safe(cell, f"{label} seed {seed}", failures)

    scores = dict(zip(cells, _run_cells([lambda c=c: job(*c) for c in cells], run.cell_workers)))
    for stacking, depth in models:
        label = _model_label(stacking, depth)
        for seed in run.seeds:
            grid.set(label, f"seed{seed}", scores[(stacking, depth, seed)])
        grid.set(label, "median", median_or_none([scores[(stacking, depth, s)] for s in run.seeds]))
    grid.notes += [f"NA: {w}: {e}" for w, e in failures]
    return (grid, trained) if keep_models else grid


def table2(run: RunConfig, out_dir=None, trained=None, extra=2, depths=None):
    """Recurrent models of depth 1..K decoded at overrides 1..K+extra (median over seeds).

    ``trained`` may supply ``{(label, seed): params}`` from ``table1`` to skip retraining.
    """
    train, test = run.data()
    vocab = synthetic_vocabulary(run.vocab_size)
    depths = list(depths or range(1, run.max_depth + 1))
    overrides = list(range(1, run.max_depth + extra + 1))
    grid = Grid("BLEU by trained depth (rows) and decoding depth (columns)", "trained", depths, overrides)
    failures = []
    trained = trained or {}

    def job(depth, seed):
        label = _model_label("recurrent", depth)
        cell_dir = None if out_dir is None else Path(out_dir) / "models" / f"{label}-seed{seed}"
        params = trained.get((label, seed))
        if params is None:
            params = _safe(lambda: train_cell(run, train, "recurrent", depth, seed, cell_dir), f"{label} seed {seed}", failures)
        scores = {}
        for m in overrides:
            scores[m] = None
            if params is not None:
                scores[m] = _safe(
                    lambda: evaluate_model(params, test, run.decode_config(depth_override=m), vocab, run.workers).bleu,
                    f"{label} seed {seed} decode {m}",
                    failures,
                )
        return scores

    cells = [(depth, seed) for depth in depths for seed in run.seeds]
    results = dict(zip(cells, _run_cells([lambda c=c: job(*c) for c in cells], run.cell_workers)))
    for depth in depths:
        for m in overrides:
            grid.set(depth, m, median_or_none([results[(depth, seed)][m] for seed in run.seeds]))
        grid.marked.add((depth, depth))
    grid.notes += [f"NA: {w}: {e}" for w, e in failures]
    return grid


def table3(run: RunConfig, out_dir=None):
    """Baseline vs back-translated BLEU per recurrent depth (median over seeds)."""
    vocab = synthetic_vocabulary(run.vocab_size)
    full = gen_synthetic(run.task, run.n_train + run.n_test, run.vocab_size, run.len_range, run.data_seed)
    real, test = full.split(run.bt_real_lines, run.n_test)
    mono_pairs = gen_synthetic(run.task, run.mono_lines, run.vocab_size, run.len_range, run.data_seed + 7919)
    mono = mono_pairs.tgt
    grid = Grid("BLEU without (No) and with (Yes) back-translation", "depth", run.bt_depths, ["No", "Yes"])
    failures = []
    tc = run.train_config(**run.bt_train)

    def job(seed):
        # depths run in order so the pseudo corpus from the first is reused;
        # the reverse model does not depend on the forward depth
        pseudo, out = None, {}
        for depth in run.bt_depths:
            state = None if out_dir is None else Path(out_dir) / "backtranslation" / f"recurrent-{depth}-seed{seed}"
            pc = PipelineConfig(
                forward_model=run.model_config(stacking="recurrent", depth=depth),
                train=tc,
                reverse_train=run.train_config(**run.bt_reverse_train),
                eval_decode=run.decode_config(),
                seed=seed,
                workers=run.workers,
            )
            res = _safe(
                lambda: pipeline_run(real, mono, test, pc, state, vocab, pseudo=pseudo),
                f"depth {depth} seed {seed}",
                failures,
            )
            if res is not None:
                pseudo = res[2].pseudo
            out[depth] = (None, None) if res is None else (res[0].bleu, res[1].bleu)
        return out

    per_seed = _run_cells([lambda s=s: job(s) for s in run.seeds], run.cell_workers)
    for depth in run.bt_depths:
        for i, col in enumerate(("No", "Yes")):
            grid.set(depth, col, median_or_none([r[depth][i] for r in per_seed]))
    grid.notes += [f"NA: {w}: {e}" for w, e in failures]
    return grid


# ---------------------------------------------------------------- parameter report


def params_report(d_model=512, d_ff=2048, depth=6, vocab_size=None, embedding_sharing="joint_all_tied", n_heads=8):
    """Text report comparing vanilla-``depth`` and recurrent parameter counts."""
    if vocab_size is None:
        vocab_size = 32000
    common = dict(
        d_model=d_model, d_ff=d_ff, n_heads=n_heads, src_vocab_size=vocab_size, tgt_vocab_size=vocab_size,
        embedding_sharing=embedding_sharing,
    )
    vanilla = ModelConfig(depth=depth, stacking="vanilla", **common)
    recurrent = ModelConfig(depth=depth, stacking="recurrent", **common)
    lines = [f"# per-tensor inventory (recurrent, d_model={d_model}, d_ff={d_ff})", "name\tshape\tcount"]
    for name, shape in parameter_shapes(recurrent).items():
        n = 1
        for s in shape:
            n *= s
        lines.append(f"{name}\t{'x'.join(map(str, shape))}\t{n}")
    pv, pr = param_count(vanilla), param_count(recurrent)
    sv, sr = param_count(vanilla, True), param_count(recurrent, True)
    pair = layer_pair_count(d_model, d_ff)
    lines += [
        "",
        "# totals",
        "model\tparams\twith_optimizer_slots",
        f"vanilla-{depth}\t{pv}\t{sv}",
        f"recurrent-any\t{pr}\t{sr}",
        "",
        "# differences",
        f"layer_pair\t{pair}",
        f"raw_difference\t{pv - pr}\t(= {depth - 1} x {pair})",
        f"with_slots_difference\t{sv - sr}\t(= 3 x {pv - pr})",
        f"ratio_vanilla_over_recurrent\t{pv / pr:.4f}",
        f"ratio_with_slots\t{sv / sr:.4f}",
    ]
    if d_model == 512 and d_ff == 2048 and depth == 6:
        published = PUBLISHED_VANILLA6 - PUBLISHED_RECURRENT
        lines.append(
            f"published_counts\t{PUBLISHED_VANILLA6} - {PUBLISHED_RECURRENT} = {published}\t"
            f"{'matches' if published == sv - sr else 'differs from'} with_slots_difference"
        )
    return "\n".join(lines) + "\n"
