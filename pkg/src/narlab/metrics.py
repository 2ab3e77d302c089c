"""Corpus BLEU, chrF and percentile-bootstrap confidence intervals.

Both metrics reduce each sentence to a small vector of additive statistics,
so a corpus score (or a bootstrap resample) is just a function of summed rows.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_NGRAM = 4

_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> list[str]:
    """mteval-v13a tokenization: split off punctuation and symbols, keep decimals intact."""
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = line.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return line.split()


@dataclass
class ScoreReport:
    metric: str
    score: float
    sentence_scores: list[float] | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    n_bootstrap: int = 0
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _normalize_refs(hyps: Sequence[str], refs) -> list[list[str]]:
    if len(hyps) == 0:
        raise ValueError("cannot score an empty corpus")
    if len(refs) != len(hyps):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} reference entries")
    out = []
    for r in refs:
        rs = [r] if isinstance(r, str) else list(r)
        if not rs:
            raise ValueError("every hypothesis needs at least one reference")
        out.append(rs)
    return out


def refs_from_streams(streams: Sequence[Sequence[str]]) -> list[list[str]]:
    """Transpose reference streams (one list per reference set) into per-sentence lists."""
    if not streams:
        raise ValueError("need at least one reference stream")
    n = len(streams[0])
    if any(len(s) != n for s in streams):
        raise ValueError("reference streams differ in length")
    return [list(col) for col in zip(*streams)]


# BLEU ------------------------------------------------------------------

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: str, refs: Sequence[str]) -> np.ndarray:
    """``[hyp_len, ref_len, correct_1..4, total_1..4]`` for one sentence.

    Counts are clipped by the per-reference maximum; the reference length is the
    one closest to the hypothesis length (shorter wins ties).
    """
    h = tokenize_13a(hyp)
    rtoks = [tokenize_13a(r) for r in refs]
    ref_len = min((abs(len(r) - len(h)), len(r)) for r in rtoks)[1]
    stats = np.zeros(2 + 2 * MAX_NGRAM, dtype=np.int64)
    stats[0], stats[1] = len(h), ref_len
    for n in range(1, MAX_NGRAM + 1):
        hc = _ngrams(h, n)
        maxref: Counter = Counter()
        for r in rtoks:
            maxref |= _ngrams(r, n)
        stats[1 + n] = sum(min(c, maxref[g]) for g, c in hc.items())
        stats[1 + MAX_NGRAM + n] = max(len(h) - n + 1, 0)
    return stats


def bleu_from_stats(stats: np.ndarray) -> float:
    """Corpus BLEU from summed statistics, with exponential smoothing of zero precisions."""
    sys_len, ref_len = float(stats[0]), float(stats[1])
    correct = stats[2 : 2 + MAX_NGRAM]
    total = stats[2 + MAX_NGRAM :]
    # no matches at all scores 0 rather than a smoothed positive value
    if sys_len == 0 or (total == 0).any() or not correct.any():
        return 0.0
    log_p = 0.0
    smooth = 1.0
    for c, t in zip(correct, total):
        if c == 0:
            smooth *= 2.0
            log_p += math.log(1.0 / (smooth * t))
        else:
            log_p += math.log(c / t)
    bp = 1.0 if sys_len >= ref_len else math.exp(1.0 - ref_len / sys_len)
    return min(100.0, 100.0 * bp * math.exp(log_p / MAX_NGRAM))


def bleu(hyps: Sequence[str], refs, bootstrap: int = 0, seed: int = 12345, level: float = 0.95) -> ScoreReport:
    refs = _normalize_refs(hyps, refs)
    stats = np.stack([bleu_stats(h, r) for h, r in zip(hyps, refs)])
    report = ScoreReport("BLEU", bleu_from_stats(stats.sum(axis=0)),
                         extra={"tokenizer": "13a", "smooth": "exp", "n_refs": max(len(r) for r in refs)})
    if bootstrap:
        report.ci_low, report.ci_high = _bootstrap(stats, bleu_from_stats, report.score, bootstrap, seed, level)
        report.n_bootstrap, report.seed = bootstrap, seed
    return report


# chrF ------------------------------------------------------------------

def _char_ngrams(text: str, order: int) -> list[Counter]:
    s = "".join(text.split())
    return [Counter(s[i : i + n] for i in range(len(s) - n + 1)) for n in range(1, order + 1)]


def _chrf_pair_stats(hc: list[Counter], rc: list[Counter]) -> np.ndarray:
    out = np.zeros(3 * len(hc), dtype=np.int64)
    for i, (h, r) in enumerate(zip(hc, rc)):
        # orders the reference is too short for are left out entirely
        out[3 * i] = sum(h.values()) if r else 0
        out[3 * i + 1] = sum(r.values())
        out[3 * i + 2] = sum((h & r).values())
    return out


def chrf_from_stats(stats: np.ndarray, beta: float = 2.0) -> float:
    """F-beta of precision and recall averaged over the orders where both sides have n-grams."""
    prec = rec = 0.0
    orders = 0
    for i in range(len(stats) // 3):
        n_hyp, n_ref, n_match = stats[3 * i : 3 * i + 3]
        if n_hyp > 0 and n_ref > 0:
            prec += n_match / n_hyp
            rec += n_match / n_ref
            orders += 1
    if orders == 0 or prec + rec == 0:
        return 0.0
    prec /= orders
    rec /= orders
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


def chrf_stats(hyp: str, refs: Sequence[str], char_order: int = 6, beta: float = 2.0) -> np.ndarray:
    """Statistics against the single reference giving the best sentence-level score."""
    hc = _char_ngrams(hyp, char_order)
    best, best_f = None, -1.0
    for r in refs:
        s = _chrf_pair_stats(hc, _char_ngrams(r, char_order))
        f = chrf_from_stats(s, beta)
        if f > best_f:
            best, best_f = s, f
    return best


def chrf(hyps: Sequence[str], refs, char_order: int = 6, beta: float = 2.0, bootstrap: int = 0,
         seed: int = 12345, level: float = 0.95) -> ScoreReport:
    refs = _normalize_refs(hyps, refs)
    stats = np.stack([chrf_stats(h, r, char_order, beta) for h, r in zip(hyps, refs)])
    fn = lambda s: chrf_from_stats(s, beta)  # noqa: E731
    report = ScoreReport("chrF", fn(stats.sum(axis=0)), [fn(s) for s in stats],
                         extra={"char_order": char_order, "beta": beta})
    if bootstrap:
        report.ci_low, report.ci_high = _bootstrap(stats, fn, report.score, bootstrap, seed, level)
        report.n_bootstrap, report.seed = bootstrap, seed
    return report


# bootstrap -------------------------------------------------------------

def bootstrap_scores(stats: np.ndarray, score_fn: Callable[[np.ndarray], float], n: int = 1000,
                     seed: int = 12345) -> np.ndarray:
    """Scores of ``n`` resamples of sentence indices (with replacement)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    N = len(stats)
    if N < 2:
        raise ValueError("bootstrap needs at least two sentences")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, N, size=(n, N))
    out = np.empty(n)
    for i in range(n):
        counts = np.bincount(idx[i], minlength=N)
        out[i] = score_fn(counts @ stats)
    return out


def _bootstrap(stats, score_fn, point: float, n: int, seed: int, level: float) -> tuple[float, float]:
    scores = bootstrap_scores(stats, score_fn, n, seed)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(scores, [tail, 100.0 - tail])
    # percentile intervals of a skewed resampling distribution can miss the
    # point estimate; widen to include it
    return float(min(lo, point)), float(max(hi, point))


METRICS = {"bleu": bleu, "chrf": chrf}


def bootstrap_ci(hyps: Sequence[str], refs, metric: str = "bleu", n: int = 1000, seed: int = 12345,
                 level: float = 0.95) -> tuple[float, float]:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    r = METRICS[metric](hyps, refs, bootstrap=n, seed=seed, level=level)
    return r.ci_low, r.ci_high
