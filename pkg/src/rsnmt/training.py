"""Adam with inverse-sqrt warmup, the training loop, checkpoints and checkpoint averaging.

Checkpoint file layout (all integers little-endian)::

    b"RSNMTCKP"  u32 version
    u32 n  + n bytes UTF-8 JSON  {"model": ModelConfig, "step": int, "meta": {...}}
    repeated until EOF:
        u32 n + n bytes UTF-8 tensor name
        u32 rank, rank x u64 dims
        u8 dtype tag (0 float32, 1 float64)
        raw row-major little-endian values
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ParallelCorpus, build_batches
from .errors import CheckpointError, ConfigError, NumericalError, ParameterError, TrainingDiverged
from .model import ModelConfig, ModelParams, batch_loss, init_params
from .tensor import Rng, no_grad

log = logging.getLogger(__name__)

MAGIC = b"RSNMTCKP"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def lr_at(step: int, d_model: int, warmup_steps: int) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1 or warmup_steps < 1:
        raise ParameterError("lr_at needs step >= 1 and warmup_steps >= 1")
    return d_model**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.997
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    updates: Counter = field(default_factory=Counter)

    def slot_count(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())


def adam_step(params: ModelParams, state: OptimizerState, lr: float, clip_norm: float | None = None) -> None:
    """One bias-corrected Adam update of every parameter, in place.

    Parameters are keyed by identity through ``named_parameters``, so a tied
    tensor owns one moment pair and is updated once with its summed gradient.
    A missing gradient counts as zero.
    """
    named = params.named_parameters()
    grads = {}
    for name, t in named.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")
        grads[name] = g
    if clip_norm is not None:
        total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if total > clip_norm:
            grads = {k: g * (clip_norm / total) for k, g in grads.items()}
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    step_size = lr * math.sqrt(corr2) / corr1
    for name, p in named.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        # eps is applied to the bias-corrected second moment
        p.data -= (step_size * m / (np.sqrt(v) + state.eps * math.sqrt(corr2))).astype(p.dtype)
        state.updates[name] += 1


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    arrays: "OrderedDict[str, np.ndarray]"
    model: dict
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def to_params(self, requires_grad: bool = True) -> ModelParams:
        return ModelParams.from_arrays(self.config, self.arrays, requires_grad=requires_grad)

    @classmethod
    def from_params(cls, params: ModelParams, step: int = 0, meta: dict | None = None) -> "Checkpoint":
        return cls(params.state_dict(), params.config.to_dict(), step, dict(meta or {}))

    def inventory(self) -> dict:
        return {k: (tuple(a.shape), a.dtype.str) for k, a in self.arrays.items()}

    def to_bytes(self) -> bytes:
        doc = json.dumps({"model": self.model, "step": int(self.step), "meta": self.meta}, sort_keys=True).encode()
        out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(doc)), doc]
        for name, arr in self.arrays.items():
            arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            tag = _DTYPE_TAGS.get(arr.dtype)
            if tag is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode()
            out += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
            out += [struct.pack("<Q", n) for n in arr.shape]
            out += [struct.pack("<B", tag), arr.tobytes()]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<bytes>") -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
        pos = 8

        def take(n):
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError(f"{source}: truncated at byte {pos}")
            chunk = buf[pos : pos + n]
            pos += n
            return chunk

        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported version {version}")
        (n,) = struct.unpack("<I", take(4))
        doc = json.loads(take(n).decode())
        arrays = OrderedDict()
        while pos < len(buf):
            (n,) = struct.unpack("<I", take(4))
            name = take(n).decode()
            (rank,) = struct.unpack("<I", take(4))
            shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
            (tag,) = struct.unpack("<B", take(1))
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"{source}: {name} has unknown dtype tag {tag}")
            dtype = _TAG_DTYPES[tag]
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()
        return cls(arrays, doc["model"], int(doc["step"]), doc.get("meta", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), str(path))


def average_checkpoints(checkpoints: Sequence) -> Checkpoint:
    """Elementwise mean of each named tensor over ``checkpoints`` (paths or objects).

    The step of the result is the largest input step; config and meta come
    from the last input.
    """
    if not checkpoints:
        raise ParameterError("average_checkpoints needs at least one checkpoint")
    ckpts = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in checkpoints]
    ref = ckpts[0].inventory()
    for i, c in enumerate(ckpts[1:], 1):
        inv = c.inventory()
        if inv != ref:
            missing = sorted(set(ref) - set(inv))
            extra = sorted(set(inv) - set(ref))
            changed = sorted(k for k in set(ref) & set(inv) if ref[k] != inv[k])
            raise CheckpointError(
                f"checkpoint {i} inventory differs: missing={missing} extra={extra} shape/dtype changed={changed}"
            )
    out = OrderedDict()
    for name, first in ckpts[0].arrays.items():
        acc = np.zeros(first.shape, dtype=np.float64)
        for c in ckpts:
            acc += c.arrays[name]
        out[name] = (acc / len(ckpts)).astype(first.dtype)
    last = ckpts[-1]
    return Checkpoint(out, dict(last.model), max(c.step for c in ckpts), dict(last.meta))


# ---------------------------------------------------------------- training loop


@dataclass
class TrainConfig:
    total_steps: int = 2000
    token_budget: int = 2048
    warmup_steps: int = 400
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.997
    adam_eps: float = 1e-9
    clip_norm: float | None = None
    checkpoint_every: int | None = None  # None: total_steps // 50, so the last 10 span the final fifth
    report_every: int = 100
    keep_checkpoints: int = 10

    def to_dict(self):
        return asdict(self)

    @property
    def checkpoint_interval(self) -> int:
        if self.checkpoint_every is not None:
            return self.checkpoint_every
        return max(1, self.total_steps // 50)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ReportRow:
    step: int
    loss: float
    dev_loss: float
    lr: float


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    skipped_sentences: int = 0
    seconds: float = 0.0

    def add(self, row: ReportRow):
        if self.rows and row.step <= self.rows[-1].step:
            raise ParameterError("report steps must be strictly increasing")
        self.rows.append(row)

    def to_tsv(self) -> str:
        lines = ["step\tloss\tdev_loss\tlr"]
        lines += [f"{r.step}\t{r.loss:.6f}\t{r.dev_loss:.6f}\t{r.lr:.8g}" for r in self.rows]
        return "\n".join(lines) + "\n"

    @property
    def final_loss(self) -> float:
        return self.rows[-1].loss if self.rows else float("nan")


def corpus_loss(params: ModelParams, corpus: ParallelCorpus, token_budget: int = 4096, depth_override=None) -> float:
    """Token-weighted mean loss over a corpus, dropout off."""
    total, tokens = 0.0, 0
    with no_grad():
        for b in build_batches(corpus, token_budget, seed=0):
            n = b.target_tokens
            total += float(batch_loss(params, b.src, b.tgt_in, b.tgt_out, depth_override=depth_override).data) * n
            tokens += n
    return total / max(tokens, 1)


def _batch_stream(corpus: ParallelCorpus, token_budget: int, seed: int, report: TrainReport):
    epoch = 0
    while True:
        batches, skipped = build_batches(corpus, token_budget, seed * 100003 + epoch, with_report=True)
        if epoch == 0:
            report.skipped_sentences = skipped
        if not batches:
            raise ParameterError("training corpus produced no batches (all sentences exceed the token budget?)")
        yield from batches
        epoch += 1


def train_loop(
    params: ModelParams,
    corpus: ParallelCorpus,
    train_config: TrainConfig,
    seed: int = 0,
    dev: ParallelCorpus | None = None,
    out_dir=None,
    meta: dict | None = None,
    progress=None,
) -> TrainReport:
    """Train ``params`` in place for ``train_config.total_steps`` updates.

    A checkpoint is taken every ``checkpoint_interval`` steps and at the end. With
    ``out_dir`` the checkpoints are written as ``ckpt-<step>.rsnmt`` and the
    report as ``train_log.tsv``; only the newest ``keep_checkpoints`` are held
    in ``report.checkpoints`` (as paths or in-memory objects).
    """
    tc = train_config
    if tc.total_steps < 1:
        raise ParameterError("total_steps must be >= 1")
    if tc.checkpoint_interval < 1:
        raise ParameterError("checkpoint_every must be >= 1")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    d_model = params.config.d_model
    state = OptimizerState(beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps)
    report = TrainReport()
    stream = _batch_stream(corpus, tc.token_budget, seed, report)
    dropout_rng = Rng(seed, 0xD20)
    initial = None
    above = 0
    window: list[float] = []
    t0 = time.perf_counter()

    for step in range(1, tc.total_steps + 1):
        batch = next(stream)
        params.zero_grad()
        loss = batch_loss(params, batch.src, batch.tgt_in, batch.tgt_out, train=True, rng=dropout_rng.fork(step))
        loss.backward()
        lr = tc.lr_scale * lr_at(step, d_model, tc.warmup_steps)
        adam_step(params, state, lr, tc.clip_norm)
        value = float(loss.data)
        window.append(value)

        if initial is None:
            initial = value
        above = above + 1 if value > 10 * initial or not math.isfinite(value) else 0
        if above >= 100:
            report.add(ReportRow(step, float(np.mean(window)), float("nan"), lr))
            raise TrainingDiverged(f"loss above 10x initial ({initial:.4f}) for 100 steps at step {step}", report)

        last = step == tc.total_steps
        if step % tc.report_every == 0 or last:
            dev_loss = corpus_loss(params, dev) if dev is not None and len(dev) else float("nan")
            report.add(ReportRow(step, float(np.mean(window)), dev_loss, lr))
            window = []
            if progress is not None:
                progress(report.rows[-1])
            log.info("step %d loss %.4f dev %.4f lr %.3g", step, report.rows[-1].loss, dev_loss, lr)
        if step % tc.checkpoint_interval == 0 or last:
            ckpt = Checkpoint.from_params(params, step, meta)
            if out is not None:
                ckpt = save_checkpoint(out / f"ckpt-{step:08d}.rsnmt", ckpt)
            report.checkpoints.append(ckpt)
            if tc.keep_checkpoints and len(report.checkpoints) > tc.keep_checkpoints:
                report.checkpoints = report.checkpoints[-tc.keep_checkpoints :]

    report.seconds = time.perf_counter() - t0
    if out is not None:
        (out / "train_log.tsv").write_text(report.to_tsv(), encoding="utf-8")
    return report


def train_model(
    model_config: ModelConfig,
    corpus: ParallelCorpus,
    train_config: TrainConfig,
    seed: int = 0,
    dev=None,
    out_dir=None,
    meta=None,
    average_last: int = 10,
    progress=None,
):
    """Fresh seeded init, train, then average the last ``average_last`` checkpoints.

    Returns ``(averaged ModelParams, TrainReport)``.
    """
    params = init_params(model_config, seed)
    report = train_loop(params, corpus, train_config, seed, dev, out_dir, meta, progress)
    ckpts = report.checkpoints[-average_last:] if average_last else report.checkpoints[-1:]
    averaged = average_checkpoints(ckpts)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "averaged.rsnmt", averaged)
    return averaged.to_params(requires_grad=False), report
