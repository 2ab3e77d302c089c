"""Connectionist temporal classification in log space.

The trellis runs over ``T`` output positions and the blank-interleaved
target ``[∅, y1, ∅, y2, ..., yU, ∅]``.  All arithmetic is float64 with
``NEG_INF`` standing in for log(0).  The batched forward-backward is shared by
the single-instance API and by the training op.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, record

NEG_INF = -1e30
# anything below this is treated as probability zero
_ZERO_THRESHOLD = -1e29
INFEASIBLE_PENALTY = 1e4


def collapse(path: Sequence[int], blank: int, merge_repeats: bool = True) -> list[int]:
    out = []
    prev = None
    for sym in path:
        sym = int(sym)
        if sym != blank and not (merge_repeats and sym == prev):
            out.append(sym)
        prev = sym
    return out


def min_length(target: Sequence[int], merge_repeats: bool = True) -> int:
    """Fewest output positions able to emit ``target``."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b) if merge_repeats else 0
    return len(target) + repeats


def is_feasible(target: Sequence[int], T: int, merge_repeats: bool = True) -> bool:
    return min_length(target, merge_repeats) <= T


@dataclass
class CtcLattice:
    log_probs: np.ndarray  # [T, C]
    ext: np.ndarray  # [U'] extended labels
    alpha: np.ndarray  # [T, U']
    beta: np.ndarray  # [T, U']
    log_likelihood: float
    log_likelihood_beta: float
    blank: int
    merge_repeats: bool

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def U_ext(self) -> int:
        return self.ext.shape[0]

    @property
    def feasible(self) -> bool:
        return self.log_likelihood > _ZERO_THRESHOLD

    @property
    def loss(self) -> float:
        return -self.log_likelihood if self.feasible else float("inf")


def _lse(*xs: np.ndarray) -> np.ndarray:
    out = xs[0]
    for x in xs[1:]:
        out = np.logaddexp(out, x)
    return np.maximum(out, NEG_INF)


def _extend(targets: Sequence[Sequence[int]], blank: int) -> tuple[np.ndarray, np.ndarray]:
    U = max((len(y) for y in targets), default=0)
    ext = np.full((len(targets), 2 * U + 1), blank, dtype=np.int64)
    lengths = np.empty(len(targets), dtype=np.int64)
    for b, y in enumerate(targets):
        ext[b, 1 : 2 * len(y) : 2] = y
        lengths[b] = 2 * len(y) + 1
    return ext, lengths


def _forward_backward(log_probs: np.ndarray, targets, input_lengths, blank: int, merge_repeats: bool):
    """Batched trellis.  Returns alpha, beta, emissions, ext, ext lengths, log-likelihoods."""
    lp = np.asarray(log_probs, dtype=np.float64)
    B, T, C = lp.shape
    ext, ext_len = _extend(targets, blank)
    S = ext.shape[1]
    in_len = np.asarray(input_lengths, dtype=np.int64)
    s_idx = np.arange(S)
    valid_s = s_idx[None, :] < ext_len[:, None]  # [B, S]
    is_label = ext != blank
    prev2 = np.full_like(ext, -1)
    prev2[:, 2:] = ext[:, :-2]
    skip_ok = is_label & valid_s
    if merge_repeats:
        skip_ok &= ext != prev2
    stay_ok = valid_s.copy()
    if not merge_repeats:
        stay_ok &= ~is_label
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)  # [B, T, S]
    neg = np.full((B, S), NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    start = np.full((B, S), NEG_INF)
    start[:, 0] = 0.0
    start[:, 1:2] = np.where(ext_len[:, None] > 1, 0.0, NEG_INF)
    alpha[:, 0] = np.where(valid_s, start + emit[:, 0], NEG_INF)
    for t in range(1, T):
        a = alpha[:, t - 1]
        stay = np.where(stay_ok, a, NEG_INF)
        one = np.full_like(a, NEG_INF)
        one[:, 1:] = a[:, :-1]
        two = np.full_like(a, NEG_INF)
        two[:, 2:] = a[:, :-2]
        two = np.where(skip_ok, two, NEG_INF)
        cur = _lse(stay, one, two) + emit[:, t]
        alpha[:, t] = np.where(valid_s & (t < in_len)[:, None], np.maximum(cur, NEG_INF), NEG_INF)

    beta = np.full((B, T, S), NEG_INF)
    final = np.full((B, S), NEG_INF)
    rows = np.arange(B)
    final[rows, ext_len - 1] = 0.0
    final[rows, np.maximum(ext_len - 2, 0)] = 0.0
    # a transition s -> s+2 is legal iff skip_ok at s+2
    skip_from = np.zeros_like(skip_ok)
    skip_from[:, :-2] = skip_ok[:, 2:]
    nxt = neg
    for t in range(T - 1, -1, -1):
        stay = np.where(stay_ok, nxt, NEG_INF)
        one = np.full_like(nxt, NEG_INF)
        one[:, :-1] = nxt[:, 1:]
        two = np.full_like(nxt, NEG_INF)
        two[:, :-2] = nxt[:, 2:]
        two = np.where(skip_from, two, NEG_INF)
        rec = _lse(stay, one, two)
        cur = np.where((t == in_len - 1)[:, None], final, rec) + emit[:, t]
        cur = np.where(valid_s & (t < in_len)[:, None], np.maximum(cur, NEG_INF), NEG_INF)
        beta[:, t] = cur
        nxt = cur

    last = alpha[rows, in_len - 1]
    ll_alpha = _lse(last[rows, ext_len - 1], np.where(ext_len > 1, last[rows, np.maximum(ext_len - 2, 0)], NEG_INF))
    second = beta[:, 0, 1] if S > 1 else neg[:, 0]
    ll_beta = _lse(beta[:, 0, 0], np.where(ext_len > 1, second, NEG_INF))
    return alpha, beta, emit, ext, ext_len, ll_alpha, ll_beta


def _posterior_grad(alpha, beta, emit, ext, ll, C: int) -> np.ndarray:
    """d(-log P)/d(log_probs) for every instance; zero rows for infeasible ones."""
    feasible = ll > _ZERO_THRESHOLD
    gamma = alpha + beta - emit - np.where(feasible, ll, 0.0)[:, None, None]
    occ = np.where(gamma > _ZERO_THRESHOLD, np.exp(np.minimum(gamma, 0.0)), 0.0)
    onehot = np.zeros(ext.shape + (C,))
    np.put_along_axis(onehot, ext[..., None], 1.0, axis=2)
    grad = -np.einsum("bts,bsc->btc", occ, onehot)
    grad[~feasible] = 0.0
    return grad


def ctc_lattice(log_probs: np.ndarray, target: Sequence[int], blank: int, merge_repeats: bool = True) -> CtcLattice:
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError(f"log_probs must be [T, C], got {lp.shape}")
    alpha, beta, _, ext, _, lla, llb = _forward_backward(lp[None], [list(target)], [lp.shape[0]], blank, merge_repeats)
    return CtcLattice(lp, ext[0], alpha[0], beta[0], float(lla[0]), float(llb[0]), blank, merge_repeats)


def ctc_loss(log_probs: np.ndarray, target: Sequence[int], blank: int, merge_repeats: bool = True) -> float:
    """``-log P(target)`` summed over all alignments; ``inf`` when no path exists."""
    return ctc_lattice(log_probs, target, blank, merge_repeats).loss


def ctc_grad(lattice: CtcLattice) -> np.ndarray:
    """Gradient of the loss with respect to ``lattice.log_probs``."""
    if not lattice.feasible:
        raise ValueError("target is infeasible for this many output positions")
    ll = np.array([lattice.log_likelihood])
    lp = lattice.log_probs
    emit = lp[:, lattice.ext][None]
    return _posterior_grad(lattice.alpha[None], lattice.beta[None], emit, lattice.ext[None], ll, lp.shape[1])[0]


def ctc_loss_batch(
    log_probs: Tensor,
    targets: Sequence[Sequence[int]],
    input_lengths: Sequence[int],
    blank: int,
    merge_repeats: bool = True,
    penalty: float = INFEASIBLE_PENALTY,
) -> tuple[Tensor, np.ndarray]:
    """Per-sentence CTC losses ``[B]`` as a differentiable tensor.

    Infeasible instances get the finite ``penalty`` and no gradient.  Also
    returns the boolean feasibility mask.
    """
    lp = log_probs.data
    B, T, C = lp.shape
    alpha, beta, emit, ext, _, ll, _ = _forward_backward(lp, targets, input_lengths, blank, merge_repeats)
    feasible = ll > _ZERO_THRESHOLD
    losses = np.where(feasible, -ll, penalty).astype(lp.dtype)
    grad = _posterior_grad(alpha, beta, emit, ext, ll, C).astype(lp.dtype)

    def vjp(g):
        return (g[:, None, None] * grad,)

    return record("ctc_loss", (log_probs,), losses, vjp), feasible


def best_path_decode(log_probs: np.ndarray, blank: int, merge_repeats: bool = True) -> list[int]:
    """Per-position argmax (lowest id on ties) followed by collapse."""
    return collapse(np.argmax(np.asarray(log_probs), axis=-1), blank, merge_repeats)


@functools.lru_cache(maxsize=64)
def _all_paths(C: int, T: int) -> np.ndarray:
    return np.array(list(itertools.product(range(C), repeat=T)), dtype=np.int64).reshape(-1, T)


def brute_force_ctc(log_probs: np.ndarray, target: Sequence[int], blank: int, merge_repeats: bool = True) -> float:
    """Reference ``-log P(target)`` by enumerating every path (test oracle)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    if C**T > 10**6:
        raise ValueError(f"{C}^{T} paths is too many to enumerate")
    target = [int(x) for x in target]
    if len(target) > T:
        return float("inf")
    paths = _all_paths(C, T)
    keep = paths != blank
    if merge_repeats:
        keep[:, 1:] &= paths[:, 1:] != paths[:, :-1]
    n_kept = keep.sum(axis=1)
    collapsed = np.full(paths.shape, -1, dtype=np.int64)
    pos = np.cumsum(keep, axis=1) - 1
    r, c = np.nonzero(keep)
    collapsed[r, pos[r, c]] = paths[r, c]
    want = np.full(T, -1, dtype=np.int64)
    want[: len(target)] = target
    match = (n_kept == len(target)) & (collapsed == want).all(axis=1)
    if not match.any():
        return float("inf")
    path_lp = lp[np.arange(T), paths[match]].sum(axis=1)
    return float(-np.logaddexp.reduce(path_lp))
