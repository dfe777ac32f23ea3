"""Encoder-decoder Transformer with vanilla and recurrent layer stacking.

Vanilla stacking keeps ``depth`` independent layers. Recurrent stacking keeps
exactly one encoder layer and one decoder layer and applies each ``depth``
times, feeding the output of one application into the next. No per-step
parameters exist, so the parameter count does not depend on depth.

Sublayers are post-norm: ``x = LayerNorm(x + Dropout(Sublayer(x)))``.
Attention projections have no bias; feed-forward layers do.
"""

from __future__ import annotations

import math
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, ShapeError
from .subword import BOS, EOS, PAD, UNK  # noqa: F401  # noqa: F401  (re-exported)
from .tensor import (
    DTYPES,
    Rng,
    Tensor,
    cross_entropy_label_smoothed,
    dropout,
    embedding,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)


STACKING = ("vanilla", "recurrent")
SHARING = ("separate", "tgt_softmax_tied", "joint_all_tied")

# additive attention bias for blocked keys; exp() of it underflows to exactly 0
_BLOCKED = -1e9


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    depth: int = 1
    stacking: str = "recurrent"
    dropout_p: float = 0.1
    label_smoothing: float = 0.1
    src_vocab_size: int = 64
    tgt_vocab_size: int = 64
    embedding_sharing: str = "tgt_softmax_tied"
    max_len: int = 256
    dtype: str = "float32"
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.stacking not in STACKING:
            raise ConfigError(f"stacking must be one of {STACKING}, got {self.stacking!r}")
        if self.embedding_sharing not in SHARING:
            raise ConfigError(f"embedding_sharing must be one of {SHARING}, got {self.embedding_sharing!r}")
        if self.embedding_sharing == "joint_all_tied" and self.src_vocab_size != self.tgt_vocab_size:
            raise ConfigError("joint_all_tied requires src_vocab_size == tgt_vocab_size")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def stored_layers(self) -> int:
        return self.depth if self.stacking == "vanilla" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


# ---------------------------------------------------------------- parameters


_ATTN = ("w_q", "w_k", "w_v", "w_o")


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass
class EncoderLayerParams:
    self_attn: AttentionParams
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ln3_gain: Tensor
    ln3_bias: Tensor


def _layer_shapes(d: int, f: int, decoder: bool) -> list[tuple[str, tuple[int, ...]]]:
    out = [(f"self_attn.{w}", (d, d)) for w in _ATTN]
    if decoder:
        out += [(f"cross_attn.{w}", (d, d)) for w in _ATTN]
    out += [("ff_w1", (d, f)), ("ff_b1", (f,)), ("ff_w2", (f, d)), ("ff_b2", (d,))]
    for i in (1, 2, 3) if decoder else (1, 2):
        out += [(f"ln{i}_gain", (d,)), (f"ln{i}_bias", (d,))]
    return out


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Canonical name -> shape inventory; tied tensors appear once."""
    d, f = config.d_model, config.d_ff
    inv: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    inv["encoder.embedding"] = (config.src_vocab_size, d)
    if config.embedding_sharing != "joint_all_tied":
        inv["decoder.embedding"] = (config.tgt_vocab_size, d)
    if config.embedding_sharing == "separate":
        inv["decoder.output_projection"] = (d, config.tgt_vocab_size)
    for i in range(config.stored_layers):
        for name, shape in _layer_shapes(d, f, decoder=False):
            inv[f"encoder.layers.{i}.{name}"] = shape
    for i in range(config.stored_layers):
        for name, shape in _layer_shapes(d, f, decoder=True):
            inv[f"decoder.layers.{i}.{name}"] = shape
    return inv


def layer_pair_count(d_model: int, d_ff: int) -> int:
    """Closed form for one encoder layer plus one decoder layer.

    encoder: 4d^2 + 2df + f + d + 2(2d); decoder: 8d^2 + 2df + f + d + 3(2d).
    """
    d, f = d_model, d_ff
    return 12 * d * d + 4 * d * f + 2 * (f + d) + 10 * d


def param_count(config: ModelConfig, include_optimizer_slots: bool = False) -> int:
    """Trainable element count (tied tensors once); x3 with Adam's two moment slots."""
    total = sum(int(np.prod(s)) for s in parameter_shapes(config).values())
    return 3 * total if include_optimizer_slots else total


class ModelParams:
    """All trainable tensors of one model plus the config that shaped them.

    Tied tensors are literally the same ``Tensor`` object:
    ``joint_all_tied`` makes ``src_embedding is tgt_embedding`` and both tied
    modes leave ``output_projection`` as ``None`` (logits use the target
    embedding transposed).
    """

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ConfigError(f"parameter inventory mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self._tensors = tensors
        self.applications: Counter = Counter()
        t = tensors
        self.src_embedding = t["encoder.embedding"]
        self.tgt_embedding = t.get("decoder.embedding", self.src_embedding)
        self.output_projection = t.get("decoder.output_projection")
        self.encoder_layers = [self._build_layer(f"encoder.layers.{i}", False) for i in range(config.stored_layers)]
        self.decoder_layers = [self._build_layer(f"decoder.layers.{i}", True) for i in range(config.stored_layers)]

    def _build_layer(self, prefix, decoder):
        t = self._tensors

        def attn(kind):
            return AttentionParams(*(t[f"{prefix}.{kind}.{w}"] for w in _ATTN))

        common = dict(
            self_attn=attn("self_attn"),
            ff_w1=t[f"{prefix}.ff_w1"],
            ff_b1=t[f"{prefix}.ff_b1"],
            ff_w2=t[f"{prefix}.ff_w2"],
            ff_b2=t[f"{prefix}.ff_b2"],
            ln1_gain=t[f"{prefix}.ln1_gain"],
            ln1_bias=t[f"{prefix}.ln1_bias"],
            ln2_gain=t[f"{prefix}.ln2_gain"],
            ln2_bias=t[f"{prefix}.ln2_bias"],
        )
        if decoder:
            return DecoderLayerParams(
                cross_attn=attn("cross_attn"),
                ln3_gain=t[f"{prefix}.ln3_gain"],
                ln3_bias=t[f"{prefix}.ln3_bias"],
                **common,
            )
        return EncoderLayerParams(**common)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self._tensors)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._tensors.values())

    def __len__(self):
        return len(self._tensors)

    def count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._tensors.items())

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays, requires_grad: bool = True) -> "ModelParams":
        dtype = DTYPES[config.dtype]
        tensors = OrderedDict(
            (name, Tensor(np.array(arrays[name], dtype=dtype), requires_grad=requires_grad, name=name))
            for name in parameter_shapes(config)
        )
        return cls(config, tensors)

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.config, self.state_dict())

    def astype(self, dtype: str) -> "ModelParams":
        return ModelParams.from_arrays(self.config.replace(dtype=dtype), self.state_dict())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded initialization: Glorot-uniform matrices, N(0, d^-1/2) embeddings,
    zero biases, unit layer-norm gains."""
    rng = Rng(seed, 0x1417)
    dtype = DTYPES[config.dtype]
    arrays = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "embedding":
            a = rng.normal(shape, config.d_model**-0.5)
        elif leaf.endswith("_gain"):
            a = np.ones(shape)
        elif leaf.endswith("_bias") or leaf.startswith("ff_b"):
            a = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            a = rng.uniform(shape, -limit, limit)
        arrays[name] = a.astype(dtype)
    return ModelParams.from_arrays(config, arrays)


# ---------------------------------------------------------------- building blocks


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigError("sinusoidal_positions needs an even d_model")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.empty((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


_PE_CACHE: dict = {}


def _positions(n: int, d: int, dtype, offset: int = 0) -> np.ndarray:
    key = (d, np.dtype(dtype).str)
    pe = _PE_CACHE.get(key)
    if pe is None or pe.shape[0] < offset + n:
        pe = sinusoidal_positions(max(offset + n, 512), d).astype(dtype)
        _PE_CACHE[key] = pe
    return pe[offset : offset + n]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, bias, w_o: Tensor) -> Tensor:
    """q [B,h,T,dh], k/v [B,h,S,dh] already split; bias broadcastable to [B,h,T,S]."""
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + Tensor(bias)
    weights = softmax(scores, axis=-1)
    return matmul(_merge_heads(matmul(weights, v)), w_o)


def _mha(x_q: Tensor, x_kv: Tensor, p: AttentionParams, n_heads: int, bias) -> Tensor:
    q = _split_heads(matmul(x_q, p.w_q), n_heads)
    k = _split_heads(matmul(x_kv, p.w_k), n_heads)
    v = _split_heads(matmul(x_kv, p.w_v), n_heads)
    return _attend(q, k, v, bias, p.w_o)


def _mask_to_bias(blocked: np.ndarray, dtype) -> np.ndarray:
    return np.where(blocked, _BLOCKED, 0.0).astype(dtype)


def multi_head_attention(q, k, v, mask, params: AttentionParams, n_heads: int) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    ``q`` is [B,T,d] (or [T,d]), ``k``/``v`` are [B,S,d] (or [S,d]) inputs before
    projection. ``mask`` is boolean, True where a key is disallowed,
    broadcastable to [B, T, S]; ``None`` allows everything. Every query must
    keep at least one allowed key.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    bias = None
    if mask is not None:
        blocked = np.broadcast_to(np.asarray(mask, dtype=bool), (q.shape[0], q.shape[1], k.shape[1]))
        if blocked.all(axis=-1).any():
            raise ShapeError("multi_head_attention: some query has every key masked")
        bias = _mask_to_bias(blocked[:, None, :, :], q.dtype)
    qh = _split_heads(matmul(q, params.w_q), n_heads)
    kh = _split_heads(matmul(k, params.w_k), n_heads)
    vh = _split_heads(matmul(v, params.w_v), n_heads)
    out = _attend(qh, kh, vh, bias, params.w_o)
    return reshape(out, out.shape[1:]) if squeeze else out


def _feed_forward(x: Tensor, layer) -> Tensor:
    h = relu(matmul(x, layer.ff_w1) + layer.ff_b1)
    return matmul(h, layer.ff_w2) + layer.ff_b2


def encoder_layer(x, layer: EncoderLayerParams, cfg: ModelConfig, bias, train, rng) -> Tensor:
    p, eps = cfg.dropout_p, cfg.ln_eps
    a = _mha(x, x, layer.self_attn, cfg.n_heads, bias)
    x = layer_norm(x + dropout(a, p, train, rng), layer.ln1_gain, layer.ln1_bias, eps)
    f = _feed_forward(x, layer)
    return layer_norm(x + dropout(f, p, train, rng), layer.ln2_gain, layer.ln2_bias, eps)


def decoder_layer(y, enc, layer: DecoderLayerParams, cfg: ModelConfig, self_bias, cross_bias, train, rng) -> Tensor:
    p, eps = cfg.dropout_p, cfg.ln_eps
    a = _mha(y, y, layer.self_attn, cfg.n_heads, self_bias)
    y = layer_norm(y + dropout(a, p, train, rng), layer.ln1_gain, layer.ln1_bias, eps)
    c = _mha(y, enc, layer.cross_attn, cfg.n_heads, cross_bias)
    y = layer_norm(y + dropout(c, p, train, rng), layer.ln2_gain, layer.ln2_bias, eps)
    f = _feed_forward(y, layer)
    return layer_norm(y + dropout(f, p, train, rng), layer.ln3_gain, layer.ln3_bias, eps)


def layer_stack(x, layers: list, depth: int, stacking: str, apply: Callable, counter=None, kind: str = "") -> Tensor:
    """Apply ``depth`` layers to ``x``.

    vanilla: ``layers`` holds exactly ``depth`` independent layers, applied in order.
    recurrent: ``layers`` holds one layer, applied ``depth`` times; each
    application consumes the previous one's output. ``apply(x, layer)`` runs one
    layer (and draws its own dropout masks, so every application gets fresh ones).
    """
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    if stacking == "vanilla":
        if depth != len(layers):
            raise ConfigError(f"vanilla stacking with depth {depth} but {len(layers)} stored layers")
        schedule = layers
    elif stacking == "recurrent":
        if len(layers) != 1:
            raise ConfigError(f"recurrent stacking expects one stored layer, got {len(layers)}")
        schedule = [layers[0]] * depth
    else:
        raise ConfigError(f"unknown stacking {stacking!r}")
    for layer in schedule:
        x = apply(x, layer)
        if counter is not None:
            counter[kind] += 1
    return x


def _effective_depth(cfg: ModelConfig, depth_override) -> int:
    if depth_override is None:
        return cfg.depth
    if cfg.stacking != "recurrent":
        raise ConfigError("depth_override is only valid for recurrent stacking")
    if depth_override < 1:
        raise ConfigError(f"depth_override must be >= 1, got {depth_override}")
    return int(depth_override)


def _as_batch(ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None, :], True
    if ids.ndim != 2:
        raise ShapeError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    return ids, False


def _embed(ids: np.ndarray, table: Tensor, cfg: ModelConfig, train, rng, offset=0) -> Tensor:
    if ids.shape[1] + offset > cfg.max_len:
        raise ShapeError(f"sequence length {ids.shape[1] + offset} exceeds max_len {cfg.max_len}")
    x = scale(embedding(table, ids), math.sqrt(cfg.d_model))
    x = x + Tensor(_positions(ids.shape[1], cfg.d_model, table.dtype, offset))
    return dropout(x, cfg.dropout_p, train, rng)


def source_bias(src_ids: np.ndarray, dtype) -> np.ndarray:
    blocked = src_ids == PAD
    if blocked.all(axis=1).any():
        raise ShapeError("a source sequence consists entirely of padding")
    return _mask_to_bias(blocked[:, None, None, :], dtype)


def encode(src_ids, params: ModelParams, depth_override: int | None = None, *, train=False, rng=None) -> Tensor:
    """Source ids [S] or [B,S] -> encoder states [S,d] or [B,S,d]."""
    cfg = params.config
    depth = _effective_depth(cfg, depth_override)
    ids, squeeze = _as_batch(src_ids)
    bias = source_bias(ids, params.src_embedding.dtype)
    x = _embed(ids, params.src_embedding, cfg, train, rng)
    x = layer_stack(
        x,
        params.encoder_layers,
        depth,
        cfg.stacking,
        lambda h, layer: encoder_layer(h, layer, cfg, bias, train, rng),
        params.applications,
        "encoder",
    )
    return reshape(x, x.shape[1:]) if squeeze else x


def _causal_bias(t: int, dtype) -> np.ndarray:
    return _mask_to_bias(np.triu(np.ones((t, t), dtype=bool), k=1)[None, None], dtype)


def output_logits(y: Tensor, params: ModelParams) -> Tensor:
    if params.output_projection is not None:
        return matmul(y, params.output_projection)
    return matmul(y, transpose(params.tgt_embedding, (1, 0)))


def decode_forward(
    tgt_in, enc_out: Tensor, params: ModelParams, depth_override: int | None = None, *, src_ids=None, train=False, rng=None
) -> Tensor:
    """Teacher-forced decoder: target input ids (BOS-shifted) -> next-token logits.

    ``src_ids`` (same batch layout as used for ``encode``) supplies the source
    padding mask; without it every encoder position is attended.
    """
    cfg = params.config
    depth = _effective_depth(cfg, depth_override)
    ids, squeeze = _as_batch(tgt_in)
    if squeeze and enc_out.ndim == 2:
        enc_out = reshape(enc_out, (1,) + enc_out.shape)
    dtype = params.tgt_embedding.dtype
    cross = None
    if src_ids is not None:
        src, _ = _as_batch(src_ids)
        cross = source_bias(src, dtype)
    self_bias = _causal_bias(ids.shape[1], dtype)
    y = _embed(ids, params.tgt_embedding, cfg, train, rng)
    y = layer_stack(
        y,
        params.decoder_layers,
        depth,
        cfg.stacking,
        lambda h, layer: decoder_layer(h, enc_out, layer, cfg, self_bias, cross, train, rng),
        params.applications,
        "decoder",
    )
    logits = output_logits(y, params)
    return reshape(logits, logits.shape[1:]) if squeeze else logits


def batch_loss(params: ModelParams, src, tgt_in, tgt_out, *, train=False, rng=None, depth_override=None) -> Tensor:
    """Mean label-smoothed cross entropy of one padded batch."""
    enc = encode(src, params, depth_override, train=train, rng=rng)
    logits = decode_forward(tgt_in, enc, params, depth_override, src_ids=src, train=train, rng=rng)
    return cross_entropy_label_smoothed(logits, tgt_out, params.config.label_smoothing, PAD)


# ---------------------------------------------------------------- incremental decoding


class IncrementalDecoder:
    """Step-by-step decoder that caches self-attention keys/values per layer application.

    Post-norm layers only look left, so the state of earlier positions never
    changes; each step runs the new position only. Used under ``no_grad``.
    """

    def __init__(self, params: ModelParams, enc_out: np.ndarray, src_ids: np.ndarray, depth_override=None):
        cfg = params.config
        self.params = params
        self.cfg = cfg
        self.depth = _effective_depth(cfg, depth_override)
        self.enc = Tensor(enc_out)
        self.cross_bias = source_bias(np.asarray(src_ids), enc_out.dtype)
        if cfg.stacking == "vanilla":
            self.schedule = list(params.decoder_layers)
        else:
            self.schedule = [params.decoder_layers[0]] * self.depth
        # cross-attention keys/values depend only on the encoder output and layer weights
        self._cross: dict = {}
        for layer in self.schedule:
            if id(layer) not in self._cross:
                ca = layer.cross_attn
                self._cross[id(layer)] = (
                    _split_heads(matmul(self.enc, ca.w_k), cfg.n_heads).data,
                    _split_heads(matmul(self.enc, ca.w_v), cfg.n_heads).data,
                )
        self.keys: list = [None] * len(self.schedule)
        self.values: list = [None] * len(self.schedule)
        self.t = 0

    def reorder(self, index: np.ndarray):
        index = np.asarray(index)
        self.keys = [k[index] for k in self.keys]
        self.values = [v[index] for v in self.values]
        self.cross_bias = self.cross_bias[index]
        self._cross = {key: (k[index], v[index]) for key, (k, v) in self._cross.items()}

    def step(self, tokens) -> np.ndarray:
        """Feed one token per row ([B]); returns logits [B, V] for the next position."""
        cfg, params = self.cfg, self.params
        ids = np.asarray(tokens, dtype=np.int64)[:, None]
        y = _embed(ids, params.tgt_embedding, cfg, False, None, offset=self.t)
        nh, eps = cfg.n_heads, cfg.ln_eps
        for i, layer in enumerate(self.schedule):
            sa = layer.self_attn
            k_new = _split_heads(matmul(y, sa.w_k), nh).data
            v_new = _split_heads(matmul(y, sa.w_v), nh).data
            if self.keys[i] is None:
                self.keys[i], self.values[i] = k_new, v_new
            else:
                self.keys[i] = np.concatenate([self.keys[i], k_new], axis=2)
                self.values[i] = np.concatenate([self.values[i], v_new], axis=2)
            q = _split_heads(matmul(y, sa.w_q), nh)
            a = _attend(q, Tensor(self.keys[i]), Tensor(self.values[i]), None, sa.w_o)
            y = layer_norm(y + a, layer.ln1_gain, layer.ln1_bias, eps)
            ck, cv = self._cross[id(layer)]
            q = _split_heads(matmul(y, layer.cross_attn.w_q), nh)
            c = _attend(q, Tensor(ck), Tensor(cv), self.cross_bias, layer.cross_attn.w_o)
            y = layer_norm(y + c, layer.ln2_gain, layer.ln2_bias, eps)
            y = layer_norm(y + _feed_forward(y, layer), layer.ln3_gain, layer.ln3_bias, eps)
            params.applications["decoder"] += 1
        self.t += 1
        return output_logits(y, params).data[:, 0, :]

