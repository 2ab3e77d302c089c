"""Scikit-learn style estimators over raw sentences.

``ARTranslator`` and ``NARTranslator`` follow the fit/predict/score
convention and inherit ``get_params``/``set_params`` from
:class:`sklearn.base.BaseEstimator`, so they clone and grid-search like any
other estimator.  The corpus filters are transformers over lists of
:class:`~narlab.corpus.SentencePair`.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import decoding
from .corpus import SentencePair, Vocabulary, clean_rule_based, dual_xent_filter
from .decoding import DecodeOptions, StepCounter
from .metrics import bleu
from .model import ModelConfig, TransformerModel
from .training import DESK_WARMUP, train
from .validation import as_pairs, check_parallel, check_sentences


class _Translator(BaseEstimator):
    variant = "AR"
    loss_kind = "xent"

    def _common_init(self, preset, epochs, batch_size, lr, warmup, clip_norm, label_smoothing, dropout, seed,
                     decode_batch_size):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.clip_norm = clip_norm
        self.label_smoothing = label_smoothing
        self.dropout = dropout
        self.seed = seed
        self.decode_batch_size = decode_batch_size

    def _config_overrides(self) -> dict:
        return {}

    def fit(self, X, y, eval_set=None, log_path=None):
        """Build vocabularies, initialize from ``seed`` and train.

        ``eval_set`` is an optional ``(X_dev, y_dev)`` pair used for the
        per-epoch dev loss in ``history_``.
        """
        X, y = check_parallel(X, y)
        self.src_vocab_ = Vocabulary.build(X)
        self.tgt_vocab_ = Vocabulary.build(y, with_blank=self.variant == "NAR")
        config = ModelConfig.from_preset(self.preset, self.variant, len(self.src_vocab_), len(self.tgt_vocab_),
                                         dropout=self.dropout, **self._config_overrides())
        model = TransformerModel.init(config, self.seed)
        src = [self.src_vocab_.encode(s) for s in X]
        tgt = [self.tgt_vocab_.encode(s) for s in y]
        dev = None
        if eval_set is not None:
            Xd, yd = check_parallel(*eval_set)
            dev = ([self.src_vocab_.encode(s) for s in Xd], [self.tgt_vocab_.encode(s) for s in yd])
        result = train(model, src, tgt, self.loss_kind, epochs=self.epochs, seed=self.seed, dev=dev,
                       batch_size=self.batch_size, base_lr=self.lr, warmup=self.warmup, clip_norm=self.clip_norm,
                       label_smoothing=self.label_smoothing, log_path=log_path, **self._train_extra())
        self.model_ = model
        self.history_ = result.history
        self.log_rows_ = result.log_rows
        return self

    def _train_extra(self) -> dict:
        return {}

    def _decode_ids(self, batch: list[list[int]]) -> tuple[list[list[int]], StepCounter]:
        raise NotImplementedError

    def translate(self, X, batch_size: int | None = None) -> tuple[list[str], StepCounter]:
        """Translate in consecutive batches; returns sentences and the summed step counter."""
        check_is_fitted(self)
        X = check_sentences(X)
        bs = batch_size or self.decode_batch_size
        ids = [self.src_vocab_.encode(s) for s in X]
        out: list[str] = []
        counter = StepCounter()
        for i in range(0, len(ids), bs):
            hyps, c = self._decode_ids(ids[i : i + bs])
            out.extend(self.tgt_vocab_.decode(h) for h in hyps)
            counter = counter + c
        return out, counter

    def predict(self, X) -> list[str]:
        return self.translate(X)[0]

    def score(self, X, y) -> float:
        """Corpus BLEU of ``predict(X)``; ``y`` holds one reference or a list of references per sentence."""
        refs = [[r] if isinstance(r, str) else list(r) for r in y]
        return bleu(self.predict(X), refs).score

    # persistence -------------------------------------------------------

    def save(self, directory: str | Path) -> Path:
        check_is_fitted(self)
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.model_.save(d / "model")
        self.src_vocab_.save(d / "src.vocab")
        self.tgt_vocab_.save(d / "tgt.vocab")
        meta = {"class": type(self).__name__, "params": self.get_params()}
        (d / "estimator.json").write_text(json.dumps(meta, indent=1))
        return d


class ARTranslator(_Translator):
    """Autoregressive Transformer translator (greedy when ``beam_size == 1``)."""

    variant = "AR"
    loss_kind = "xent"

    def __init__(self, preset="Tiny", epochs=20, batch_size=32, lr=3e-3, warmup=DESK_WARMUP, clip_norm=1.0,
                 label_smoothing=0.0, dropout=0.0, seed=0, beam_size=1, max_len_factor=3.0,
                 length_norm_alpha=1.0, decode_batch_size=64):
        self._common_init(preset, epochs, batch_size, lr, warmup, clip_norm, label_smoothing, dropout, seed,
                          decode_batch_size)
        self.beam_size = beam_size
        self.max_len_factor = max_len_factor
        self.length_norm_alpha = length_norm_alpha

    def _options(self) -> DecodeOptions:
        mode = "greedy" if self.beam_size == 1 else "beam"
        return DecodeOptions(mode, self.beam_size, self.max_len_factor, self.length_norm_alpha)

    def _decode_ids(self, batch):
        return decoding.translate(self.model_, batch, self._options())

    def cross_entropy(self, X, y) -> np.ndarray:
        """Length-normalized (per token, EOS included) cross-entropy of ``y`` given ``X``."""
        check_is_fitted(self)
        X, y = check_parallel(X, y)
        src = [self.src_vocab_.encode(s) for s in X]
        tgt = [self.tgt_vocab_.encode(s) for s in y]
        out = np.empty(len(src))
        bs = self.decode_batch_size
        for i in range(0, len(src), bs):
            lp, n = decoding.sequence_logprob(self.model_, src[i : i + bs], tgt[i : i + bs])
            out[i : i + bs] = -lp / n
        return out


class NARTranslator(_Translator):
    """CTC-trained non-autoregressive translator with ``split_factor`` state splitting."""

    variant = "NAR"
    loss_kind = "ctc"

    def __init__(self, preset="Tiny", epochs=30, batch_size=32, lr=3e-3, warmup=DESK_WARMUP, clip_norm=1.0,
                 label_smoothing=0.0, dropout=0.0, seed=0, split_factor=3, merge_repeats=True,
                 decode_batch_size=64):
        self._common_init(preset, epochs, batch_size, lr, warmup, clip_norm, label_smoothing, dropout, seed,
                          decode_batch_size)
        self.split_factor = split_factor
        self.merge_repeats = merge_repeats

    def _config_overrides(self) -> dict:
        return {"split_factor": self.split_factor}

    def _train_extra(self) -> dict:
        return {"merge_repeats": self.merge_repeats}

    def _decode_ids(self, batch):
        return decoding.translate_nar(self.model_, batch, self.merge_repeats)


class EnsembleTranslator:
    """Log-probability averaging over fitted AR translators that share vocabularies."""

    def __init__(self, members: Sequence[ARTranslator], beam_size: int = 4, max_len_factor: float = 3.0,
                 length_norm_alpha: float = 1.0, decode_batch_size: int = 64):
        if not members:
            raise ValueError("empty ensemble")
        for m in members:
            check_is_fitted(m)
            if not isinstance(m, ARTranslator):
                raise TypeError("ensembles are built from ARTranslator members")
            if m.src_vocab_ != members[0].src_vocab_ or m.tgt_vocab_ != members[0].tgt_vocab_:
                raise ValueError("ensemble members must share vocabularies")
        self.members = list(members)
        self.beam_size = beam_size
        self.max_len_factor = max_len_factor
        self.length_norm_alpha = length_norm_alpha
        self.decode_batch_size = decode_batch_size

    def translate(self, X, batch_size: int | None = None) -> tuple[list[str], StepCounter]:
        X = check_sentences(X)
        first = self.members[0]
        mode = "greedy" if self.beam_size == 1 else "beam"
        opts = DecodeOptions(mode, self.beam_size, self.max_len_factor, self.length_norm_alpha)
        models = [m.model_ for m in self.members]
        ids = [first.src_vocab_.encode(s) for s in X]
        bs = batch_size or self.decode_batch_size
        out, counter = [], StepCounter()
        for i in range(0, len(ids), bs):
            hyps, c = decoding.translate(models, ids[i : i + bs], opts)
            out.extend(first.tgt_vocab_.decode(h) for h in hyps)
            counter = counter + c
        return out, counter

    def predict(self, X) -> list[str]:
        return self.translate(X)[0]


def load_translator(directory: str | Path) -> _Translator:
    d = Path(directory)
    meta = json.loads((d / "estimator.json").read_text())
    cls = {"ARTranslator": ARTranslator, "NARTranslator": NARTranslator}[meta["class"]]
    est = cls(**meta["params"])
    est.model_ = TransformerModel.load(d / "model")
    est.src_vocab_ = Vocabulary.load(d / "src.vocab")
    est.tgt_vocab_ = Vocabulary.load(d / "tgt.vocab")
    est.history_ = []
    est.log_rows_ = []
    return est


class RuleBasedCleaner(TransformerMixin, BaseEstimator):
    """Drops pairs that are empty, too long, too unbalanced, or contain non-Latin script."""

    def __init__(self, max_tokens=100, max_ratio=2.0):
        self.max_tokens = max_tokens
        self.max_ratio = max_ratio

    def fit(self, X, y=None):
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> list[SentencePair]:
        return clean_rule_based(as_pairs(X), self.max_tokens, self.max_ratio)


class DualXentFilter(TransformerMixin, BaseEstimator):
    """Keeps the best ``keep_fraction`` of pairs by dual cross-entropy agreement."""

    def __init__(self, forward=None, backward=None, keep_fraction=0.75):
        self.forward = forward
        self.backward = backward
        self.keep_fraction = keep_fraction

    def fit(self, X, y=None):
        if self.forward is None or self.backward is None:
            raise ValueError("DualXentFilter needs forward and backward translators")
        check_is_fitted(self.forward)
        check_is_fitted(self.backward)
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> list[SentencePair]:
        return dual_xent_filter(as_pairs(X), self.forward, self.backward, self.keep_fraction)
