"""Translation drivers over token-id batches, with sequential-step accounting.

``decoder_invocations`` counts sequential decoder passes: one per generated
position for autoregressive decoding (ensemble members run in the same step)
and exactly one per batch for the non-autoregressive model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD
from .ctc import best_path_decode
from .model import TransformerModel, decode_ar, decode_ar_step, encode, nar_forward


@dataclass
class DecodeOptions:
    mode: str = "greedy"  # greedy | beam | nar
    beam_size: int = 4
    max_len_factor: float = 3.0
    length_norm_alpha: float = 1.0
    ensemble: list = field(default_factory=list)  # extra members decoded with the main model

    def __post_init__(self):
        if self.mode not in ("greedy", "beam", "nar"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass
class StepCounter:
    decoder_invocations: int = 0
    wall_time_ns: int = 0

    def __add__(self, other: "StepCounter") -> "StepCounter":
        return StepCounter(self.decoder_invocations + other.decoder_invocations,
                           self.wall_time_ns + other.wall_time_ns)


def pad_sources(batch: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Wrap each sentence in BOS/EOS and right-pad; returns ids and validity mask."""
    S = max(len(s) for s in batch) + 2
    ids = np.full((len(batch), S), PAD, dtype=np.int64)
    mask = np.zeros((len(batch), S), dtype=bool)
    for i, s in enumerate(batch):
        row = [BOS, *s, EOS]
        ids[i, : len(row)] = row
        mask[i, : len(row)] = True
    return ids, mask


def _members(models, opts: DecodeOptions | None) -> list[TransformerModel]:
    members = list(models) if isinstance(models, (list, tuple)) else [models]
    if opts is not None:
        members += list(opts.ensemble)
    if not members:
        raise ValueError("no models given")
    first = members[0].config
    for m in members[1:]:
        c = m.config
        if (c.variant, c.src_vocab, c.tgt_vocab) != (first.variant, first.src_vocab, first.tgt_vocab):
            raise ValueError("ensemble members must share variant and vocabularies")
    return members


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _length_limits(mask: np.ndarray, factor: float) -> np.ndarray:
    return np.maximum(1, np.floor(factor * mask.sum(axis=1)).astype(np.int64))


class _EnsembleStepper:
    """Averages per-step log-probs over members, each with its own cache."""

    def __init__(self, members, ids, mask):
        self.members = members
        self.hs = [encode(m, ids, mask) for m in members]
        self.mask = mask
        self.caches = [None] * len(members)

    def step(self, prefix: np.ndarray) -> np.ndarray:
        total = None
        for j, m in enumerate(self.members):
            logits, self.caches[j] = decode_ar_step(m, prefix, self.hs[j], self.mask, self.caches[j])
            lp = _log_softmax(logits.astype(np.float64))
            total = lp if total is None else total + lp
        total = total / len(self.members)
        total[:, [PAD, BOS]] = -np.inf  # never emitted, and invisible once detokenized
        return total

    def reorder(self, rows: np.ndarray) -> None:
        self.hs = [T.Tensor(h.data[rows]) for h in self.hs]
        self.mask = self.mask[rows]
        self.caches = [c.reorder(rows) if c is not None else None for c in self.caches]


def translate_greedy_ar(models, src_batch: Sequence[Sequence[int]], opts: DecodeOptions | None = None):
    """Argmax decoding; EOS is forced at each sentence's length limit."""
    opts = opts or DecodeOptions()
    members = _members(models, opts)
    if members[0].config.variant != "AR":
        raise ValueError("greedy decoding needs AR models")
    t0 = time.perf_counter_ns()
    ids, mask = pad_sources(src_batch)
    limits = _length_limits(mask, opts.max_len_factor)
    stepper = _EnsembleStepper(members, ids, mask)
    B = len(src_batch)
    prefix = np.full((B, 1), BOS, dtype=np.int64)
    outputs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    steps = 0
    while not done.all():
        logp = stepper.step(prefix)
        steps += 1
        tok = np.argmax(logp, axis=1)
        tok[steps >= limits] = EOS
        for b in np.flatnonzero(~done):
            if tok[b] == EOS:
                done[b] = True
            else:
                outputs[b].append(int(tok[b]))
        tok[done] = PAD
        prefix = np.concatenate([prefix, tok[:, None]], axis=1)
    return outputs, StepCounter(steps, time.perf_counter_ns() - t0)


def beam_search(models, src_batch: Sequence[Sequence[int]], opts: DecodeOptions | None = None):
    """Length-normalized beam search: score = sum(log p) / len**alpha, len counting EOS.

    Returns hypotheses (without EOS), their normalized scores and a StepCounter.
    """
    opts = opts or DecodeOptions(mode="beam")
    members = _members(models, opts)
    if members[0].config.variant != "AR":
        raise ValueError("beam search needs AR models")
    t0 = time.perf_counter_ns()
    K, alpha = opts.beam_size, opts.length_norm_alpha
    B = len(src_batch)
    ids, mask = pad_sources(src_batch)
    limits = _length_limits(mask, opts.max_len_factor)
    rows = np.repeat(np.arange(B), K)
    stepper = _EnsembleStepper(members, ids[rows], mask[rows])
    prefix = np.full((B * K, 1), BOS, dtype=np.int64)
    cum = np.full((B, K), -np.inf)
    cum[:, 0] = 0.0
    hyps: list[list[list[int]]] = [[[] for _ in range(K)] for _ in range(B)]
    finished: list[list[tuple[float, float, list[int]]]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    steps = 0
    while not done.all():
        logp = stepper.step(prefix)
        steps += 1
        V = logp.shape[1]
        at_limit = steps >= limits
        lp3 = logp.reshape(B, K, V)
        if at_limit.any():
            eos = lp3[at_limit, :, EOS]
            lp3[at_limit] = -np.inf
            lp3[at_limit, :, EOS] = eos
        cand = cum[:, :, None] + lp3
        flat = cand.reshape(B, K * V)
        order = np.argsort(-flat, axis=1, kind="stable")[:, : 2 * K]
        new_cum = np.full((B, K), -np.inf)
        src_rows = np.zeros((B, K), dtype=np.int64)
        new_tok = np.full((B, K), PAD, dtype=np.int64)
        new_hyps: list[list[list[int]]] = [[[] for _ in range(K)] for _ in range(B)]
        for b in range(B):
            src_rows[b] = b * K
            if done[b]:
                continue
            n_live = 0
            for rank, idx in enumerate(order[b]):
                score = flat[b, idx]
                if not np.isfinite(score):
                    break
                k, v = divmod(int(idx), V)
                if v == EOS:
                    if rank < K:
                        seq = hyps[b][k]
                        finished[b].append((score / (len(seq) + 1) ** alpha, score, list(seq)))
                    continue
                if n_live < K:
                    new_cum[b, n_live] = score
                    src_rows[b, n_live] = b * K + k
                    new_tok[b, n_live] = v
                    new_hyps[b][n_live] = hyps[b][k] + [v]
                    n_live += 1
            if n_live == 0 or at_limit[b] or len(finished[b]) >= K or (
                    finished[b] and _cannot_improve(finished[b], new_cum[b], limits[b], alpha)):
                done[b] = True
        cum, hyps = new_cum, new_hyps
        reorder = src_rows.reshape(-1)
        stepper.reorder(reorder)
        prefix = np.concatenate([prefix[reorder], new_tok.reshape(-1, 1)], axis=1)
    outputs, scores = [], []
    for b in range(B):
        best = max(finished[b], key=lambda f: f[0])
        outputs.append(best[2])
        scores.append(float(best[0]))
    return outputs, scores, StepCounter(steps, time.perf_counter_ns() - t0)


def _cannot_improve(finished, live_cum: np.ndarray, limit: int, alpha: float) -> bool:
    best = max(f[0] for f in finished)
    live = live_cum[np.isfinite(live_cum)]
    if live.size == 0:
        return True
    # log-probs only fall and lengths only grow, so the best any live hypothesis
    # can reach is its current sum spread over the longest allowed length
    return best >= float(live.max()) / float(limit) ** alpha


def sequence_logprob(models, src_batch: Sequence[Sequence[int]], tgt_batch: Sequence[Sequence[int]],
                     renormalize: bool = False):
    """Teacher-forced ``sum log p(y_t | y_<t, x)`` (EOS included) and lengths.

    Uses the full-recompute decoder, so it is independent of the cached
    incremental path used by the search procedures.  Ensemble log-probs are
    averaged as in search; ``renormalize`` turns the average into a proper
    distribution (log-linear pooling), which is what a loss should use.
    """
    members = _members(models, None)
    ids, mask = pad_sources(src_batch)
    L = max(len(y) for y in tgt_batch) + 1
    B = len(tgt_batch)
    tgt_in = np.full((B, L), PAD, dtype=np.int64)
    tgt_out = np.full((B, L), PAD, dtype=np.int64)
    weights = np.zeros((B, L))
    for i, y in enumerate(tgt_batch):
        tgt_in[i, : len(y) + 1] = [BOS, *y]
        tgt_out[i, : len(y) + 1] = [*y, EOS]
        weights[i, : len(y) + 1] = 1.0
    avg = None
    for m in members:
        logits = decode_ar(m, tgt_in, encode(m, ids, mask), mask).data.astype(np.float64)
        lp = _log_softmax(logits)
        avg = lp if avg is None else avg + lp
    avg /= len(members)
    if renormalize:
        avg = _log_softmax(avg)
    total = np.take_along_axis(avg, tgt_out[..., None], axis=-1)[..., 0]
    return (total * weights).sum(axis=1), weights.sum(axis=1).astype(np.int64)


def translate_nar(model: TransformerModel, src_batch: Sequence[Sequence[int]], merge_repeats: bool = True):
    """encode -> split -> one decoder pass -> best-path CTC decoding."""
    if model.config.variant != "NAR":
        raise ValueError("translate_nar needs a NAR model")
    t0 = time.perf_counter_ns()
    ids, mask = pad_sources(src_batch)
    logits, out_mask = nar_forward(model, ids, mask)
    out_len = out_mask.sum(axis=1)
    blank = model.config.blank_id
    outputs = [best_path_decode(logits.data[b, : out_len[b]], blank, merge_repeats) for b in range(len(src_batch))]
    return outputs, StepCounter(1, time.perf_counter_ns() - t0)


def translate(models, src_batch: Sequence[Sequence[int]], opts: DecodeOptions, merge_repeats: bool = True):
    """Dispatch on ``opts.mode``; returns outputs and a StepCounter."""
    if opts.mode == "nar":
        members = _members(models, opts)
        if len(members) != 1:
            raise ValueError("NAR decoding takes a single model")
        return translate_nar(members[0], src_batch, merge_repeats)
    if opts.mode == "beam":
        out, _, counter = beam_search(models, src_batch, opts)
        return out, counter
    return translate_greedy_ar(models, src_batch, opts)

