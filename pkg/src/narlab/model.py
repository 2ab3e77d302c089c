"""Transformer encoder with an autoregressive or a CTC-style non-autoregressive decoder.

Both variants share the pre-norm encoder.  The non-autoregressive variant
projects every encoder state to ``k`` states (``split_states``) and runs a
decoder stack without the causal mask over the ``k*S`` result; its output
layer has one extra symbol, the blank.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_VALUE = -1e9

PRESETS = {
    "Large": dict(d_model=64, n_heads=8, d_ff=256, enc_layers=6, dec_layers=6),
    "Base": dict(d_model=32, n_heads=4, d_ff=128, enc_layers=6, dec_layers=6),
    "Small": dict(d_model=32, n_heads=4, d_ff=128, enc_layers=3, dec_layers=3),
    "Micro": dict(d_model=32, n_heads=4, d_ff=128, enc_layers=2, dec_layers=2),
    "Tiny": dict(d_model=32, n_heads=4, d_ff=128, enc_layers=1, dec_layers=1),
}


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int  # output width; includes the blank for NAR
    variant: str = "NAR"
    preset: str = "Tiny"
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 1
    dec_layers: int = 1
    max_len: int = 256
    split_factor: int = 3
    dropout: float = 0.0
    dtype: str = "f32"
    blank_id: int = 4
    nar_cross_attention: bool = True

    def __post_init__(self):
        if self.variant not in ("AR", "NAR"):
            raise ValueError(f"variant must be AR or NAR, got {self.variant!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.split_factor < 1:
            raise ValueError("split_factor must be >= 1")
        if self.variant == "NAR" and not 0 <= self.blank_id < self.tgt_vocab:
            raise ValueError("NAR target vocabulary must contain the blank id")

    @classmethod
    def from_preset(cls, preset: str, variant: str, src_vocab: int, tgt_vocab: int, **overrides) -> "ModelConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        kw = dict(PRESETS[preset])
        kw.update(overrides)
        return cls(src_vocab=src_vocab, tgt_vocab=tgt_vocab, variant=variant, preset=preset, **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def _attn_shapes(prefix: str, d: int, cross: bool) -> dict[str, tuple]:
    if cross:
        return {
            f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
            f"{prefix}.wkv": (d, 2 * d), f"{prefix}.bkv": (2 * d,),
            f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
        }
    return {
        f"{prefix}.wqkv": (d, 3 * d), f"{prefix}.bqkv": (3 * d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
    }


def _block_shapes(prefix: str, cfg: ModelConfig, cross: bool) -> dict[str, tuple]:
    d, ff = cfg.d_model, cfg.d_ff
    shapes = {f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,)}
    shapes.update(_attn_shapes(f"{prefix}.self", d, False))
    if cross:
        shapes.update({f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,)})
        shapes.update(_attn_shapes(f"{prefix}.cross", d, True))
    shapes.update({
        f"{prefix}.ln3.g": (d,), f"{prefix}.ln3.b": (d,),
        f"{prefix}.ff.w1": (d, ff), f"{prefix}.ff.b1": (ff,),
        f"{prefix}.ff.w2": (ff, d), f"{prefix}.ff.b2": (d,),
    })
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Names and shapes of every parameter; a pure function of the config."""
    d = cfg.d_model
    shapes: dict[str, tuple] = {"src_emb": (cfg.src_vocab, d)}
    for i in range(cfg.enc_layers):
        shapes.update(_block_shapes(f"enc.{i}", cfg, cross=False))
    shapes.update({"enc.ln.g": (d,), "enc.ln.b": (d,)})
    if cfg.variant == "AR":
        shapes["tgt_emb"] = (cfg.tgt_vocab, d)
        cross = True
    else:
        shapes.update({"split.w": (d, cfg.split_factor * d), "split.b": (cfg.split_factor * d,)})
        cross = cfg.nar_cross_attention
    for i in range(cfg.dec_layers):
        shapes.update(_block_shapes(f"dec.{i}", cfg, cross=cross))
    shapes.update({"dec.ln.g": (d,), "dec.ln.b": (d,), "out.w": (d, cfg.tgt_vocab), "out.b": (cfg.tgt_vocab,)})
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


@functools.lru_cache(maxsize=32)
def _sinusoid(length: int, d: int, dtype: str) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : (d - d // 2)])
    pe = pe.astype(T.DTYPES[dtype])
    pe.setflags(write=False)
    return pe


def positional_encoding(length: int, d: int, dtype: str = "f32", offset: int = 0) -> np.ndarray:
    return _sinusoid(offset + length, d, dtype)[offset:]


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "TransformerModel":
        """Glorot-uniform matrices, unit gains, zero biases."""
        rng = np.random.default_rng(seed)
        dt = T.DTYPES[config.dtype]
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if len(shape) == 2:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                data = rng.uniform(-limit, limit, size=shape)
            elif leaf == "g":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data.astype(dt), requires_grad=True, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def save(self, prefix: str | Path) -> Path:
        return T.save_checkpoint(prefix, self.params, extra={"config": json.loads(self.config.to_json())})

    @classmethod
    def load(cls, prefix: str | Path) -> "TransformerModel":
        tensors, extra = T.load_checkpoint(prefix)
        cfg = ModelConfig(**extra["config"])
        expected = param_shapes(cfg)
        if {k: tuple(v.shape) for k, v in tensors.items()} != expected:
            raise ValueError("checkpoint parameters do not match the stored config")
        for t in tensors.values():
            t.requires_grad = True
        return cls(cfg, tensors)


# building blocks ----------------------------------------------------------


def _ln(model: TransformerModel, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, model[f"{prefix}.g"], model[f"{prefix}.b"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    dh = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = T.add_constant(scores, mask)
    return T.matmul(T.softmax(scores, axis=-1), v)


def _qkv(model: TransformerModel, prefix: str, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    H = model.config.n_heads
    d = model.config.d_model
    qkv = T.add(T.matmul(x, model[f"{prefix}.wqkv"]), model[f"{prefix}.bqkv"])
    B, L, _ = qkv.shape
    heads = T.transpose(T.reshape(qkv, (B, L, 3, H, d // H)), (2, 0, 3, 1, 4))  # [3, B, H, L, dh]
    return T.select(heads, 0), T.select(heads, 1), T.select(heads, 2)


def _project_out(model: TransformerModel, prefix: str, ctx: Tensor) -> Tensor:
    return T.add(T.matmul(_merge_heads(ctx), model[f"{prefix}.wo"]), model[f"{prefix}.bo"])


def _self_attention(model, prefix, x, mask) -> Tensor:
    q, k, v = _qkv(model, prefix, x)
    return _project_out(model, prefix, _attend(q, k, v, mask))


def _cross_kv(model: TransformerModel, prefix: str, memory: Tensor) -> tuple[Tensor, Tensor]:
    H = model.config.n_heads
    d = model.config.d_model
    kv = T.add(T.matmul(memory, model[f"{prefix}.wkv"]), model[f"{prefix}.bkv"])
    B, S, _ = kv.shape
    heads = T.transpose(T.reshape(kv, (B, S, 2, H, d // H)), (2, 0, 3, 1, 4))
    return T.select(heads, 0), T.select(heads, 1)


def _cross_attention(model, prefix, x, memory_kv, mask) -> Tensor:
    H = model.config.n_heads
    q = _split_heads(T.add(T.matmul(x, model[f"{prefix}.wq"]), model[f"{prefix}.bq"]), H)
    k, v = memory_kv
    return _project_out(model, prefix, _attend(q, k, v, mask))


def _feed_forward(model, prefix, x, rng) -> Tensor:
    h = T.relu(T.add(T.matmul(x, model[f"{prefix}.w1"]), model[f"{prefix}.b1"]))
    h = T.dropout(h, model.config.dropout, rng)
    return T.add(T.matmul(h, model[f"{prefix}.w2"]), model[f"{prefix}.b2"])


def _residual(x: Tensor, y: Tensor, rate: float, rng) -> Tensor:
    return T.add(x, T.dropout(y, rate, rng))


def padding_mask(mask: np.ndarray) -> np.ndarray:
    """Additive key mask ``[B, 1, 1, L]`` from a boolean validity mask ``[B, L]``."""
    return np.where(mask, 0.0, MASK_VALUE)[:, None, None, :].astype(np.float32)


def causal_mask(length: int, offset: int = 0) -> np.ndarray:
    q = np.arange(offset, offset + length)[:, None]
    k = np.arange(offset + length)[None, :]
    return np.where(k <= q, 0.0, MASK_VALUE)[None, None].astype(np.float32)


# public operations --------------------------------------------------------


def encode(model: TransformerModel, src: np.ndarray, src_mask: np.ndarray, rng=None) -> Tensor:
    """Encoder states ``[B, S, d]``; ``src_mask`` marks real (non-pad) positions."""
    cfg = model.config
    src = np.asarray(src)
    if src.ndim != 2:
        raise ValueError(f"src must be [B, S], got {src.shape}")
    B, S = src.shape
    if S > cfg.max_len:
        raise ValueError(f"source length {S} exceeds max_len {cfg.max_len}")
    if src.size and (src.min() < 0 or src.max() >= cfg.src_vocab):
        raise IndexError("source token id out of range")
    x = T.mul(T.embedding(model["src_emb"], src), math.sqrt(cfg.d_model))
    x = T.add_constant(x, positional_encoding(S, cfg.d_model, cfg.dtype)[None])
    x = T.dropout(x, cfg.dropout, rng)
    mask = padding_mask(np.asarray(src_mask, dtype=bool))
    for i in range(cfg.enc_layers):
        p = f"enc.{i}"
        x = _residual(x, _self_attention(model, f"{p}.self", _ln(model, f"{p}.ln1", x), mask), cfg.dropout, rng)
        x = _residual(x, _feed_forward(model, f"{p}.ff", _ln(model, f"{p}.ln3", x), rng), cfg.dropout, rng)
    return _ln(model, "enc.ln", x)


def split_states(model: TransformerModel, h: Tensor, k: int | None = None) -> Tensor:
    """Project each state to ``k*d`` and unfold into ``k`` consecutive states."""
    cfg = model.config
    k = cfg.split_factor if k is None else k
    if k != cfg.split_factor:
        raise ValueError(f"k={k} does not match the model's split_factor={cfg.split_factor}")
    B, S, d = h.shape
    proj = T.add(T.matmul(h, model["split.w"]), model["split.b"])
    return T.reshape(proj, (B, S * k, d))


def split_mask(src_mask: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.asarray(src_mask, dtype=bool), k, axis=1)


def decode_nar(model: TransformerModel, s: Tensor, s_mask: np.ndarray, h: Tensor, src_mask: np.ndarray, rng=None) -> Tensor:
    """Logits ``[B, k*S, V+1]`` from one non-causal pass over the split states."""
    cfg = model.config
    if cfg.variant != "NAR":
        raise ValueError("decode_nar needs a NAR model")
    B, L, d = s.shape
    x = T.add_constant(s, positional_encoding(L, d, cfg.dtype)[None])
    x = T.dropout(x, cfg.dropout, rng)
    self_mask = padding_mask(s_mask)
    mem_mask = padding_mask(src_mask)
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        x = _residual(x, _self_attention(model, f"{p}.self", _ln(model, f"{p}.ln1", x), self_mask), cfg.dropout, rng)
        if cfg.nar_cross_attention:
            kv = _cross_kv(model, f"{p}.cross", h)
            x = _residual(x, _cross_attention(model, f"{p}.cross", _ln(model, f"{p}.ln2", x), kv, mem_mask), cfg.dropout, rng)
        x = _residual(x, _feed_forward(model, f"{p}.ff", _ln(model, f"{p}.ln3", x), rng), cfg.dropout, rng)
    x = _ln(model, "dec.ln", x)
    return T.add(T.matmul(x, model["out.w"]), model["out.b"])


def nar_forward(model: TransformerModel, src: np.ndarray, src_mask: np.ndarray, rng=None) -> tuple[Tensor, np.ndarray]:
    """encode -> split_states -> decode_nar; returns logits and output validity mask."""
    h = encode(model, src, src_mask, rng)
    s = split_states(model, h)
    s_mask = split_mask(src_mask, model.config.split_factor)
    return decode_nar(model, s, s_mask, h, src_mask, rng), s_mask


def _ar_embed(model: TransformerModel, tgt: np.ndarray, offset: int = 0) -> Tensor:
    cfg = model.config
    tgt = np.asarray(tgt)
    if tgt.size and (tgt.min() < 0 or tgt.max() >= cfg.tgt_vocab):
        raise IndexError("target token id out of range")
    x = T.mul(T.embedding(model["tgt_emb"], tgt), math.sqrt(cfg.d_model))
    return T.add_constant(x, positional_encoding(tgt.shape[1], cfg.d_model, cfg.dtype, offset)[None])


def decode_ar(model: TransformerModel, tgt_in: np.ndarray, h: Tensor, src_mask: np.ndarray, rng=None) -> Tensor:
    """Teacher-forced logits ``[B, L, V]`` for every prefix of ``tgt_in`` (full recompute)."""
    cfg = model.config
    if cfg.variant != "AR":
        raise ValueError("decode_ar needs an AR model")
    tgt_in = np.asarray(tgt_in)
    if tgt_in.shape[1] > cfg.max_len:
        raise ValueError(f"prefix length {tgt_in.shape[1]} exceeds max_len {cfg.max_len}")
    x = T.dropout(_ar_embed(model, tgt_in), cfg.dropout, rng)
    self_mask = causal_mask(tgt_in.shape[1])
    mem_mask = padding_mask(src_mask)
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        x = _residual(x, _self_attention(model, f"{p}.self", _ln(model, f"{p}.ln1", x), self_mask), cfg.dropout, rng)
        kv = _cross_kv(model, f"{p}.cross", h)
        x = _residual(x, _cross_attention(model, f"{p}.cross", _ln(model, f"{p}.ln2", x), kv, mem_mask), cfg.dropout, rng)
        x = _residual(x, _feed_forward(model, f"{p}.ff", _ln(model, f"{p}.ln3", x), rng), cfg.dropout, rng)
    x = _ln(model, "dec.ln", x)
    return T.add(T.matmul(x, model["out.w"]), model["out.b"])


@dataclass
class DecoderCache:
    """Per-call incremental state for :func:`decode_ar_step`."""

    length: int
    self_k: list[np.ndarray]
    self_v: list[np.ndarray]
    cross_k: list[np.ndarray]
    cross_v: list[np.ndarray]
    mem_mask: np.ndarray

    def reorder(self, rows: np.ndarray) -> "DecoderCache":
        pick = lambda xs: [x[rows] for x in xs]  # noqa: E731
        return DecoderCache(self.length, pick(self.self_k), pick(self.self_v), pick(self.cross_k),
                            pick(self.cross_v), self.mem_mask[rows])


def init_cache(model: TransformerModel, h: Tensor, src_mask: np.ndarray) -> DecoderCache:
    cfg = model.config
    B = h.shape[0]
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    empty = np.zeros((B, H, 0, dh), dtype=h.data.dtype)
    ck, cv = [], []
    for i in range(cfg.dec_layers):
        k, v = _cross_kv(model, f"dec.{i}.cross", h)
        ck.append(k.data)
        cv.append(v.data)
    return DecoderCache(0, [empty] * cfg.dec_layers, [empty] * cfg.dec_layers, ck, cv, padding_mask(src_mask))


def decode_ar_step(model: TransformerModel, tgt_prefix: np.ndarray, h: Tensor | None, src_mask: np.ndarray | None,
                   cache: DecoderCache | None = None) -> tuple[np.ndarray, DecoderCache]:
    """Logits ``[B, V]`` for the next token after ``tgt_prefix``.

    Only positions not yet in ``cache`` are computed; with ``cache=None`` a
    fresh cache is built from ``h``.  The returned cache is a new object.
    """
    cfg = model.config
    if cfg.variant != "AR":
        raise ValueError("decode_ar_step needs an AR model")
    tgt_prefix = np.asarray(tgt_prefix)
    if tgt_prefix.ndim != 2 or tgt_prefix.shape[1] < 1:
        raise ValueError("prefix must be [B, t] with t >= 1")
    t = tgt_prefix.shape[1]
    if t > cfg.max_len:
        raise ValueError(f"prefix length {t} exceeds max_len {cfg.max_len}")
    if cache is None:
        cache = init_cache(model, h, src_mask)
    start = cache.length
    new = tgt_prefix[:, start:]
    x = _ar_embed(model, new, offset=start)
    mask = causal_mask(new.shape[1], offset=start)
    sk, sv = list(cache.self_k), list(cache.self_v)
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        q, k, v = _qkv(model, f"{p}.self", _ln(model, f"{p}.ln1", x))
        sk[i] = np.concatenate([sk[i], k.data], axis=2)
        sv[i] = np.concatenate([sv[i], v.data], axis=2)
        ctx = _attend(q, Tensor(sk[i]), Tensor(sv[i]), mask)
        x = T.add(x, _project_out(model, f"{p}.self", ctx))
        kv = (Tensor(cache.cross_k[i]), Tensor(cache.cross_v[i]))
        x = T.add(x, _cross_attention(model, f"{p}.cross", _ln(model, f"{p}.ln2", x), kv, cache.mem_mask))
        x = T.add(x, _feed_forward(model, f"{p}.ff", _ln(model, f"{p}.ln3", x), None))
    x = _ln(model, "dec.ln", x)
    logits = T.add(T.matmul(x, model["out.w"]), model["out.b"])
    updated = DecoderCache(t, sk, sv, cache.cross_k, cache.cross_v, cache.mem_mask)
    return logits.data[:, -1], updated
