"""Optimization loop for AR (cross-entropy) and NAR (CTC) models."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD
from .ctc import ctc_loss_batch, is_feasible
from .decoding import pad_sources
from .model import ModelConfig, TransformerModel, decode_ar, encode, nar_forward

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.998
ADAM_EPS = 1e-9
WMT_BASE_LR = 1e-4
WMT_WARMUP = 8000
DESK_WARMUP = 400


class TrainingError(RuntimeError):
    pass


def lr_schedule(t: int, base_lr: float, warmup: int) -> float:
    """Linear warm-up to ``base_lr`` at step ``warmup``, then inverse square-root decay."""
    if t < 1:
        raise ValueError("step numbering starts at 1")
    return base_lr * min(t / warmup, math.sqrt(warmup / t))


@dataclass
class OptimizerState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    base_lr: float = WMT_BASE_LR
    warmup: int = DESK_WARMUP


class Adam:
    def __init__(self, params: Sequence[T.Tensor], base_lr: float = WMT_BASE_LR, warmup: int = DESK_WARMUP,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS,
                 clip_norm: float | None = 1.0):
        self.params = list(params)
        self.clip_norm = clip_norm
        self.state = OptimizerState(0, [np.zeros_like(p.data) for p in self.params],
                                    [np.zeros_like(p.data) for p in self.params], beta1, beta2, eps, base_lr, warmup)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        st = self.state
        st.step += 1
        lr = lr_schedule(st.step, st.base_lr, st.warmup)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip_norm is not None:
            grads = clip_by_global_norm(grads, self.clip_norm)
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.data.dtype)
        return lr


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


def make_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Length-sorted fixed-size batches in shuffled order (random tie-break within a length)."""
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.random(len(lengths)), lengths))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _target_arrays(tgt: Sequence[Sequence[int]]):
    L = max(len(y) for y in tgt) + 1
    tgt_in = np.full((len(tgt), L), PAD, dtype=np.int64)
    tgt_out = np.full((len(tgt), L), PAD, dtype=np.int64)
    w = np.zeros((len(tgt), L), dtype=np.float32)
    for i, y in enumerate(tgt):
        tgt_in[i, : len(y) + 1] = [BOS, *y]
        tgt_out[i, : len(y) + 1] = [*y, EOS]
        w[i, : len(y) + 1] = 1.0
    return tgt_in, tgt_out, w


def batch_loss(model: TransformerModel, src: Sequence[Sequence[int]], tgt: Sequence[Sequence[int]],
               loss_kind: str, rng=None, label_smoothing: float = 0.0, merge_repeats: bool = True):
    """Mean per-target-token loss of one batch as a scalar tensor, and its token count."""
    ids, mask = pad_sources(src)
    if loss_kind == "xent":
        tgt_in, tgt_out, w = _target_arrays(tgt)
        logits = decode_ar(model, tgt_in, encode(model, ids, mask, rng), mask, rng)
        logp = T.log_softmax(logits)
        n_tok = float(w.sum())
        loss = T.nll(logp, tgt_out, w)
        if label_smoothing > 0.0:
            V = logp.shape[-1]
            uniform = T.mul(T.tensor_sum(T.mul(logp, T.Tensor(np.broadcast_to(w[..., None], logp.shape) / V))), -1.0)
            loss = T.add(T.mul(loss, 1.0 - label_smoothing), T.mul(uniform, label_smoothing))
        return T.mul(loss, 1.0 / n_tok), n_tok
    if loss_kind == "ctc":
        logits, out_mask = nar_forward(model, ids, mask, rng)
        logp = T.log_softmax(logits)
        losses, _ = ctc_loss_batch(logp, tgt, out_mask.sum(axis=1), model.config.blank_id, merge_repeats)
        n_tok = float(sum(len(y) for y in tgt)) or 1.0
        return T.mul(T.tensor_sum(losses), 1.0 / n_tok), n_tok
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def evaluate_loss(model, src, tgt, loss_kind: str, batch_size: int = 64, merge_repeats: bool = True) -> float:
    """Token-weighted mean loss without recording a tape."""
    total = tokens = 0.0
    order = np.argsort([len(s) for s in src], kind="stable")
    for i in range(0, len(order), batch_size):
        idx = order[i : i + batch_size]
        loss, n = batch_loss(model, [src[j] for j in idx], [tgt[j] for j in idx], loss_kind, merge_repeats=merge_repeats)
        total += loss.item() * n
        tokens += n
    return total / max(tokens, 1.0)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_loss: float | None


@dataclass
class TrainResult:
    model: TransformerModel
    history: list[EpochStats] = field(default_factory=list)
    log_rows: list[tuple] = field(default_factory=list)

    @property
    def final_dev_loss(self) -> float | None:
        return self.history[-1].dev_loss if self.history else None


def infeasible_fraction(src, tgt, split_factor: int, merge_repeats: bool = True) -> float:
    bad = sum(not is_feasible(y, split_factor * (len(x) + 2), merge_repeats) for x, y in zip(src, tgt))
    return bad / max(len(src), 1)


def train(model: TransformerModel, src: Sequence[Sequence[int]], tgt: Sequence[Sequence[int]], loss_kind: str,
          epochs: int = 20, seed: int = 0, dev: tuple | None = None, batch_size: int = 32,
          base_lr: float = 3e-3, warmup: int = DESK_WARMUP, clip_norm: float | None = 1.0,
          label_smoothing: float = 0.0, merge_repeats: bool = True, log_every: int = 50,
          log_path: str | Path | None = None) -> TrainResult:
    """Train ``model`` in place; deterministic for a given seed and initial model."""
    expected = {"xent": "AR", "ctc": "NAR"}.get(loss_kind)
    if expected is None:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if model.config.variant != expected:
        raise ValueError(f"loss {loss_kind} needs a {expected} model, got {model.config.variant}")
    if len(src) != len(tgt) or not src:
        raise ValueError("need a non-empty parallel corpus")
    if loss_kind == "ctc":
        frac = infeasible_fraction(src, tgt, model.config.split_factor, merge_repeats)
        if frac > 0.5:
            raise TrainingError(f"{frac:.0%} of pairs cannot be aligned with split factor "
                                f"{model.config.split_factor}; raise the split factor")
    rng = np.random.default_rng(seed)
    dropout_rng = rng if model.config.dropout > 0 else None
    opt = Adam(model.parameters(), base_lr=base_lr, warmup=warmup, clip_norm=clip_norm)
    result = TrainResult(model)
    lengths = [len(x) + len(y) for x, y in zip(src, tgt)]
    for epoch in range(1, epochs + 1):
        epoch_loss = epoch_tokens = 0.0
        for idx in make_batches(lengths, batch_size, rng):
            opt.zero_grad()
            with T.Tape() as tape:
                loss, n = batch_loss(model, [src[i] for i in idx], [tgt[i] for i in idx], loss_kind,
                                     dropout_rng, label_smoothing, merge_repeats)
            T.backward(loss, tape)
            lr = opt.step()
            epoch_loss += loss.item() * n
            epoch_tokens += n
            if opt.state.step % log_every == 0:
                result.log_rows.append((opt.state.step, lr, loss.item(), None))
        dev_loss = evaluate_loss(model, dev[0], dev[1], loss_kind, merge_repeats=merge_repeats) if dev else None
        stats = EpochStats(epoch, epoch_loss / epoch_tokens, dev_loss)
        result.history.append(stats)
        result.log_rows.append((opt.state.step, lr, stats.train_loss, dev_loss))
        log.info("epoch %d train %.4f dev %s", epoch, stats.train_loss, dev_loss)
    if log_path is not None:
        write_log(result.log_rows, log_path)
    return result


def write_log(rows, path: str | Path) -> None:
    lines = ["step\tlr\ttrain_loss\tdev_loss"]
    for step, lr, tl, dl in rows:
        lines.append(f"{step}\t{lr:.6g}\t{tl:.6f}\t{'' if dl is None else f'{dl:.6f}'}")
    Path(path).write_text("\n".join(lines) + "\n")


def train_ensemble(config: ModelConfig, src, tgt, n: int = 4, seeds: Sequence[int] | None = None,
                   loss_kind: str | None = None, **train_kw) -> list[TrainResult]:
    """``n`` independently seeded trainings (initialization and batch order)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = list(seeds) if seeds is not None else list(range(n))
    if len(seeds) != n:
        raise ValueError("need one seed per ensemble member")
    loss_kind = loss_kind or ("xent" if config.variant == "AR" else "ctc")
    return [train(TransformerModel.init(config, s), src, tgt, loss_kind, seed=s, **train_kw) for s in seeds]
