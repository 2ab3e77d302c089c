"""Input checks shared by the estimators and transformers."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .corpus import SentencePair


def check_sentences(X) -> list[str]:
    """A non-empty list of strings; numpy string arrays and tuples are accepted."""
    if isinstance(X, str):
        raise TypeError("expected a sequence of sentences, got a single string")
    if isinstance(X, np.ndarray):
        if X.ndim != 1:
            raise ValueError(f"expected a 1-D array of sentences, got shape {X.shape}")
        X = X.tolist()
    X = list(X)
    if not X:
        raise ValueError("no sentences given")
    for i, s in enumerate(X):
        if not isinstance(s, str):
            raise TypeError(f"sentence {i} is {type(s).__name__}, expected str")
    return X


def check_parallel(X, y) -> tuple[list[str], list[str]]:
    X, y = check_sentences(X), check_sentences(y)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} sources but {len(y)} targets")
    return X, y


def as_pairs(X: Iterable) -> list[SentencePair]:
    """Accept SentencePair objects or ``(src, tgt)`` tuples."""
    out = []
    for item in X:
        if isinstance(item, SentencePair):
            out.append(item)
        elif isinstance(item, (tuple, list)) and len(item) == 2:
            out.append(SentencePair(str(item[0]), str(item[1])))
        else:
            raise TypeError(f"cannot interpret {item!r} as a sentence pair")
    return out
