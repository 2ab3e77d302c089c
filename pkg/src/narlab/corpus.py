"""Parallel-corpus handling: vocabularies, cleaning, filtering, distillation, toy tasks."""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import regex

PAD, BOS, EOS, UNK, BLANK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
BLANK_TOKEN = "<blank>"

AUTHENTIC = "authentic"
DISTILLED = "distilled"

_NON_LATIN = regex.compile(r"[^\p{Latin}\p{Common}\p{Inherited}]")


def tokenize(text: str) -> list[str]:
    return text.split()


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Token <-> id map with reserved ids first (and the blank at 4 when requested)."""

    def __init__(self, tokens: Iterable[str] = (), with_blank: bool = False):
        self.with_blank = with_blank
        self.itos: list[str] = list(RESERVED) + ([BLANK_TOKEN] if with_blank else [])
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, sentences: Iterable[str], with_blank: bool = False, min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for s in sentences for tok in tokenize(s))
        ordered = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls(ordered, with_blank=with_blank)

    @property
    def n_special(self) -> int:
        return len(RESERVED) + int(self.with_blank)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, sentence: str) -> list[int]:
        return [self.stoi.get(tok, UNK) for tok in tokenize(sentence)]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i >= self.n_special:
                out.append(self.itos[i])
            elif i == UNK:
                out.append(RESERVED[UNK])
        return detokenize(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        with_blank = len(lines) > BLANK and lines[BLANK] == BLANK_TOKEN
        return cls(lines[len(RESERVED) + int(with_blank):], with_blank=with_blank)


@dataclass
class SentencePair:
    src: str
    tgt: str
    origin: str = AUTHENTIC
    scores: dict | None = None


def read_corpus(prefix: str | Path, origin: str = AUTHENTIC) -> list[SentencePair]:
    """Read ``<prefix>.src`` / ``<prefix>.tgt`` (one sentence per line)."""
    prefix = str(prefix)
    src = Path(prefix + ".src").read_text(encoding="utf-8").splitlines()
    tgt = Path(prefix + ".tgt").read_text(encoding="utf-8").splitlines()
    if len(src) != len(tgt):
        raise ValueError(f"{prefix}: {len(src)} source lines vs {len(tgt)} target lines")
    return [SentencePair(s, t, origin) for s, t in zip(src, tgt)]


def write_corpus(pairs: Sequence[SentencePair], prefix: str | Path) -> None:
    prefix = str(prefix)
    Path(prefix + ".src").write_text("".join(p.src + "\n" for p in pairs), encoding="utf-8")
    Path(prefix + ".tgt").write_text("".join(p.tgt + "\n" for p in pairs), encoding="utf-8")


def write_scores(pairs: Sequence[SentencePair], path: str | Path) -> None:
    """TSV sidecar: line number, forward xent, backward xent, combined score."""
    rows = ["line\tH_f\tH_b\tscore"]
    for i, p in enumerate(pairs, 1):
        s = p.scores or {}
        rows.append(f"{i}\t{s.get('H_f', '')}\t{s.get('H_b', '')}\t{s.get('score', '')}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


# cleaning -----------------------------------------------------------------


def has_non_latin(text: str) -> bool:
    """True if any character is outside the Latin, Common and Inherited scripts."""
    return _NON_LATIN.search(text) is not None


def is_clean(pair: SentencePair, max_tokens: int = 100, max_ratio: float = 2.0) -> bool:
    ns, nt = len(tokenize(pair.src)), len(tokenize(pair.tgt))
    if not (1 <= ns <= max_tokens and 1 <= nt <= max_tokens):
        return False
    if max(ns, nt) / min(ns, nt) > max_ratio:
        return False
    return not (has_non_latin(pair.src) or has_non_latin(pair.tgt))


def clean_rule_based(pairs: Sequence[SentencePair], max_tokens: int = 100, max_ratio: float = 2.0) -> list[SentencePair]:
    return [p for p in pairs if is_clean(p, max_tokens, max_ratio)]


# model-based filtering and distillation -----------------------------------


def dual_xent_scores(pairs: Sequence[SentencePair], forward, backward) -> np.ndarray:
    """Per-pair ``[H_f, H_b, score]``; lower score is better.

    ``forward``/``backward`` are fitted AR translators exposing
    ``cross_entropy(src_sentences, tgt_sentences)``.
    """
    from sklearn.utils.validation import check_is_fitted

    check_is_fitted(forward)
    check_is_fitted(backward)
    src = [p.src for p in pairs]
    tgt = [p.tgt for p in pairs]
    hf = np.asarray(forward.cross_entropy(src, tgt), dtype=np.float64)
    hb = np.asarray(backward.cross_entropy(tgt, src), dtype=np.float64)
    score = np.abs(hf - hb) + 0.5 * (hf + hb)
    return np.stack([hf, hb, score], axis=1)


def dual_xent_filter(pairs: Sequence[SentencePair], forward, backward, keep_fraction: float = 0.75) -> list[SentencePair]:
    """Keep the ``ceil(keep_fraction * N)`` best-scoring pairs, in input order."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    if not pairs:
        return []
    stats = dual_xent_scores(pairs, forward, backward)
    n_keep = math.ceil(keep_fraction * len(pairs) - 1e-9)
    keep = np.sort(np.argsort(stats[:, 2], kind="stable")[:n_keep])
    out = []
    for i in keep:
        hf, hb, sc = stats[i]
        out.append(replace(pairs[i], scores={"H_f": float(hf), "H_b": float(hb), "score": float(sc)}))
    return out


def distill_corpus(teachers, pairs: Sequence[SentencePair], beam_size: int = 4, n_workers: int = 1,
                   shard_size: int = 256) -> list[SentencePair]:
    """Replace targets with teacher translations of the (authentic) sources.

    ``teachers`` is a fitted AR translator or a list of them, decoded as an
    ensemble.  Shards may be translated by several threads; order is kept.
    """
    from .estimators import EnsembleTranslator

    if isinstance(teachers, (list, tuple)):
        teacher = EnsembleTranslator(list(teachers), beam_size=beam_size)
    else:
        teacher = EnsembleTranslator([teachers], beam_size=beam_size)
    sources = [p.src for p in pairs]
    shards = [sources[i : i + shard_size] for i in range(0, len(sources), shard_size)]
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            parts = list(pool.map(teacher.predict, shards))
    else:
        parts = [teacher.predict(s) for s in shards]
    hyps = [h for part in parts for h in part]
    return [SentencePair(p.src, h, DISTILLED) for p, h in zip(pairs, hyps)]


# synthetic tasks ----------------------------------------------------------


@dataclass
class TaskData:
    kind: str
    train: list[SentencePair]
    dev: list[SentencePair]
    test: list[SentencePair]
    dev_refs: list[list[str]]
    test_refs: list[list[str]]
    meta: dict = field(default_factory=dict)


def _lexicon_target(tokens: Sequence[int], perm: np.ndarray, n_adj: int) -> list[int]:
    """Token-wise bijection; an adjective (id < n_adj) before a noun swaps with it."""
    out = []
    i = 0
    while i < len(tokens):
        a = tokens[i]
        if a < n_adj and i + 1 < len(tokens) and tokens[i + 1] >= n_adj:
            out.extend([perm[tokens[i + 1]], perm[a]])
            i += 2
        else:
            out.append(perm[a])
            i += 1
    return out


def gen_task(kind: str, n_train: int = 2000, n_dev: int = 200, n_test: int = 200, seed: int = 0,
             vocab_size: int = 20, min_len: int = 3, max_len: int = 8, n_phrases: int = 8) -> TaskData:
    """Seeded synthetic corpora: ``copy``, ``reverse``, ``lexicon`` or ``two_mode``.

    Train, dev and test source sentences are pairwise disjoint.  For
    ``two_mode`` every source contains one ambiguous phrase with two equally
    valid renderings; training targets pick one uniformly and dev/test carry
    both as references.
    """
    if kind not in ("copy", "reverse", "lexicon", "two_mode"):
        raise ValueError(f"unknown task {kind!r}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(vocab_size)
    n_adj = vocab_size // 4
    src_word = (lambda i: f"s{i}") if kind in ("lexicon", "two_mode") else (lambda i: f"w{i}")
    tgt_word = (lambda i: f"t{i}") if kind in ("lexicon", "two_mode") else (lambda i: f"w{i}")
    modes = [((f"A{j}x", f"A{j}y"), (f"B{j}x", f"B{j}y")) for j in range(n_phrases)]

    seen: set[str] = set()

    def sample():
        while True:
            n = int(rng.integers(min_len, max_len + 1))
            content = [int(x) for x in rng.integers(0, vocab_size, size=n)]
            if kind == "two_mode":
                phrase = int(rng.integers(n_phrases))
                at = int(rng.integers(0, n + 1))
                src_toks = [src_word(c) for c in content]
                src_toks[at:at] = [f"p{phrase}", f"q{phrase}"]
                key = " ".join(src_toks)
            else:
                phrase = at = None
                key = " ".join(src_word(c) for c in content)
            if key not in seen:
                seen.add(key)
                return key, content, phrase, at

    def targets(content, phrase, at) -> list[str]:
        if kind == "copy":
            return [" ".join(tgt_word(c) for c in content)]
        if kind == "reverse":
            return [" ".join(tgt_word(c) for c in reversed(content))]
        if kind == "lexicon":
            return [" ".join(tgt_word(t) for t in _lexicon_target(content, perm, n_adj))]
        words = [tgt_word(perm[c]) for c in content]
        return [" ".join(words[:at] + list(m) + words[at:]) for m in modes[phrase]]

    def make(n, pick_mode: bool):
        pairs, refs, phrase_ids = [], [], []
        for _ in range(n):
            key, content, phrase, at = sample()
            tg = targets(content, phrase, at)
            choice = int(rng.random() < 0.5) if (pick_mode and len(tg) > 1) else 0
            pairs.append(SentencePair(key, tg[choice]))
            refs.append(tg)
            phrase_ids.append(phrase)
        return pairs, refs, phrase_ids

    test, test_refs, test_ph = make(n_test, False)
    dev, dev_refs, dev_ph = make(n_dev, False)
    train, _, train_ph = make(n_train, True)
    meta = {"vocab_size": vocab_size, "seed": seed}
    if kind == "two_mode":
        meta.update(modes=modes, train_phrases=train_ph, dev_phrases=dev_ph, test_phrases=test_ph)
    return TaskData(kind, train, dev, test, dev_refs, test_refs, meta)


def is_cross_mode(output: Sequence[str] | str, mode_a: Sequence[str], mode_b: Sequence[str]) -> bool:
    """True iff ``output`` mixes tokens from both renderings of one phrase."""
    toks = set(tokenize(output) if isinstance(output, str) else output)
    return bool(toks & set(mode_a)) and bool(toks & set(mode_b))


def cross_mode_rate(outputs: Sequence[str], phrases: Sequence[int], modes) -> float:
    hits = sum(is_cross_mode(o, *modes[p]) for o, p in zip(outputs, phrases))
    return hits / max(len(outputs), 1)


def mode_of(output: str, mode_a: Sequence[str], mode_b: Sequence[str]) -> str | None:
    """``"A"`` or ``"B"`` if the output renders the phrase purely one way, else None."""
    toks = tokenize(output)
    has_a = all(t in toks for t in mode_a) and not set(toks) & set(mode_b)
    has_b = all(t in toks for t in mode_b) and not set(toks) & set(mode_a)
    return "A" if has_a else "B" if has_b else None
