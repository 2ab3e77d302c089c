import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import BaseEstimator

from narlab.corpus import (AUTHENTIC, BLANK, BLANK_TOKEN, DISTILLED, EOS, UNK, SentencePair, Vocabulary,
                           clean_rule_based, cross_mode_rate, detokenize, distill_corpus, dual_xent_filter,
                           dual_xent_scores, gen_task, has_non_latin, is_cross_mode, mode_of, read_corpus,
                           tokenize, write_corpus, write_scores)

words = st.text(alphabet="abcxyz", min_size=1, max_size=5)


@given(st.lists(words, max_size=8))
def test_tokenize_detokenize_round_trip(toks):
    text = " ".join(toks)
    assert detokenize(tokenize(text)) == text
    assert tokenize(detokenize(toks)) == toks


def test_vocabulary_reserved_ids_and_round_trip(tmp_path):
    v = Vocabulary.build(["b a a", "c a"], with_blank=True)
    assert v.itos[:5] == ["<pad>", "<s>", "</s>", "<unk>", BLANK_TOKEN]
    assert v.encode("a b c d") == [5, 6, 7, UNK]
    assert v.decode([5, 6, BLANK, 7, EOS, 5]) == "a b c"
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v
    plain = Vocabulary.build(["b a"])
    assert plain.encode("a") == [4]
    plain.save(tmp_path / "p.txt")
    assert not Vocabulary.load(tmp_path / "p.txt").with_blank


@given(st.lists(words, min_size=1, max_size=20))
def test_vocabulary_is_bijective(toks):
    v = Vocabulary.build([" ".join(toks)])
    assert v.decode(v.encode(" ".join(toks))) == " ".join(toks)
    assert len(set(v.itos)) == len(v.itos)


def test_corpus_io(tmp_path):
    pairs = [SentencePair("a b", "x y"), SentencePair("c", "z")]
    write_corpus(pairs, tmp_path / "c")
    assert read_corpus(tmp_path / "c") == pairs
    (tmp_path / "bad.src").write_text("a\nb\n")
    (tmp_path / "bad.tgt").write_text("a\n")
    with pytest.raises(ValueError):
        read_corpus(tmp_path / "bad")
    write_scores([SentencePair("a", "b", scores={"H_f": 1.0, "H_b": 2.0, "score": 2.5})], tmp_path / "s.tsv")
    assert (tmp_path / "s.tsv").read_text().splitlines()[1] == "1\t1.0\t2.0\t2.5"


def test_non_latin_detection():
    assert not has_non_latin("Grüße, naïve café 3.5% - «quote»")
    assert has_non_latin("hello мир")
    assert has_non_latin("東京")
    assert has_non_latin("γεια")


def test_cleaning_rules():
    ok = SentencePair("a b c", "x y z")
    cyr = SentencePair("a b c", "x y д")
    ratio = SentencePair(" ".join("a" * 10), " ".join("b" * 30))
    empty = SentencePair("", "x")
    long_ = SentencePair(" ".join(["a"] * 101), " ".join(["b"] * 101))
    edge = SentencePair(" ".join(["a"] * 100), " ".join(["b"] * 50))
    kept = clean_rule_based([ok, cyr, ratio, empty, long_, edge])
    assert kept == [ok, edge]
    assert clean_rule_based(kept) == kept


class _StubTranslator(BaseEstimator):
    """Cross-entropy from a lookup table, for exercising the filter arithmetic."""

    def __init__(self, table):
        self.table = table
        self.fitted_ = True

    def fit(self, X, y):
        return self

    def cross_entropy(self, X, y):
        return np.array([self.table[(a, b)] for a, b in zip(X, y)])


def test_dual_xent_score_formula_and_ceiling():
    pairs = [SentencePair(f"s{i}", f"t{i}") for i in range(7)]
    hf = {(p.src, p.tgt): float(i) for i, p in enumerate(pairs)}
    hb = {(p.tgt, p.src): 2.0 * i for i, p in enumerate(pairs)}
    stats = dual_xent_scores(pairs, _StubTranslator(hf), _StubTranslator(hb))
    i = np.arange(7)
    np.testing.assert_allclose(stats[:, 2], np.abs(i - 2 * i) + 1.5 * i)
    kept = dual_xent_filter(pairs, _StubTranslator(hf), _StubTranslator(hb))
    assert [p.src for p in kept] == [f"s{i}" for i in range(math.ceil(0.75 * 7))]
    assert kept[0].scores == {"H_f": 0.0, "H_b": 0.0, "score": 0.0}
    assert len(dual_xent_filter(pairs[:4], _StubTranslator(hf), _StubTranslator(hb))) == 3
    full = dual_xent_filter(pairs, _StubTranslator(hf), _StubTranslator(hb), keep_fraction=1.0)
    assert [p.src for p in full] == [p.src for p in pairs]


def test_dual_xent_filter_requires_fitted_models():
    from sklearn.exceptions import NotFittedError

    from narlab import ARTranslator

    with pytest.raises(NotFittedError):
        dual_xent_filter([SentencePair("a", "b")], ARTranslator(), ARTranslator())


def test_noisy_pair_scores_worse_than_clean_twin(lexicon_task, lexicon_pair_models):
    fwd, bwd = lexicon_pair_models
    rng = np.random.default_rng(0)
    vocab = sorted({t for p in lexicon_task.train for t in p.tgt.split()})
    clean = lexicon_task.dev[:20]
    noisy = [SentencePair(p.src, " ".join(rng.choice(vocab, size=len(p.tgt.split())))) for p in clean]
    stats = dual_xent_scores(clean + noisy, fwd, bwd)
    assert (stats[20:, 2] > stats[:20, 2]).all()
    kept = dual_xent_filter(clean[:3] + noisy[:1], fwd, bwd)
    assert [p.tgt for p in kept] == [p.tgt for p in clean[:3]]


def test_distill_preserves_size_and_marks_origin(lexicon_task, lexicon_pair_models):
    fwd, _ = lexicon_pair_models
    pairs = lexicon_task.dev[:30]
    one = distill_corpus(fwd, pairs, beam_size=2, shard_size=7)
    two = distill_corpus([fwd], pairs, beam_size=2, n_workers=3, shard_size=7)
    assert len(one) == len(pairs) and one == two
    assert {p.origin for p in one} == {DISTILLED}
    assert [p.src for p in one] == [p.src for p in pairs]
    assert all(p.origin == AUTHENTIC for p in pairs)


def test_gen_task_kinds():
    copy = gen_task("copy", 50, 10, 10, seed=1)
    assert all(p.src == p.tgt for p in copy.train)
    rev = gen_task("reverse", 50, 10, 10, seed=1)
    assert all(p.tgt.split() == p.src.split()[::-1] for p in rev.train)
    for kind in ("copy", "lexicon", "two_mode"):
        d = gen_task(kind, 300, 50, 50, seed=2)
        srcs = [{p.src for p in split} for split in (d.train, d.dev, d.test)]
        assert not (srcs[0] & srcs[1] or srcs[0] & srcs[2] or srcs[1] & srcs[2])
    with pytest.raises(ValueError):
        gen_task("summarize")


def test_lexicon_is_deterministic_bijection():
    d = gen_task("lexicon", 2000, 0, 0, seed=3, vocab_size=20)
    n_adj = 20 // 4
    is_adj = lambda tok: int(tok[1:]) < n_adj  # noqa: E731
    mapping = {}
    for p in d.train:
        s, t = p.src.split(), p.tgt.split()
        assert len(s) == len(t)
        if not any(map(is_adj, s)):
            for a, b in zip(s, t):
                assert mapping.setdefault(a, b) == b
    assert len(set(mapping.values())) == len(mapping)
    # an adjective followed by a noun comes out after it
    swaps = 0
    for p in d.train:
        s, t = p.src.split(), p.tgt.split()
        if len(s) >= 2 and is_adj(s[0]) and not is_adj(s[1]) and s[1] in mapping:
            assert t[0] == mapping[s[1]]
            swaps += 1
    assert swaps > 50
    assert gen_task("lexicon", 20, 5, 5, seed=3).train == gen_task("lexicon", 20, 5, 5, seed=3).train


def test_two_mode_balance_and_references():
    d = gen_task("two_mode", n_train=10_000, n_dev=20, n_test=20, seed=0)
    modes = d.meta["modes"]
    a = sum(mode_of(p.tgt, *modes[ph]) == "A" for p, ph in zip(d.train, d.meta["train_phrases"]))
    assert abs(a / 10_000 - 0.5) <= 0.02
    for refs, ph in zip(d.test_refs, d.meta["test_phrases"]):
        assert len(refs) == 2
        assert mode_of(refs[0], *modes[ph]) == "A" and mode_of(refs[1], *modes[ph]) == "B"
    tokens = [t for m in modes[0] for t in m]
    assert len(set(tokens)) == 4


def test_cross_mode_detector_exhaustive():
    mode_a, mode_b = ("a1", "a2"), ("b1", "b2")
    toks = [*mode_a, *mode_b]
    for x, y in itertools.product(toks, repeat=2):
        mixed = (x in mode_a) != (y in mode_a)
        assert is_cross_mode([x, y], mode_a, mode_b) == mixed
    outs = ["w a1 a2", "w b1 a2", "b1 b2", "a1 b2 w"]
    assert cross_mode_rate(outs, [0] * 4, [(mode_a, mode_b)]) == 0.5


def test_distilled_two_mode_targets_are_mode_pure():
    from narlab import ARTranslator

    d = gen_task("two_mode", n_train=6000, n_dev=10, n_test=10, seed=0)
    pairs = d.train + d.train[:200]
    teacher = ARTranslator(epochs=3).fit([p.src for p in d.train], [p.tgt for p in d.train])
    dist = distill_corpus(teacher, pairs, beam_size=1)
    phrases = d.meta["train_phrases"] + d.meta["train_phrases"][:200]
    assert cross_mode_rate([p.tgt for p in dist], phrases, d.meta["modes"]) <= 0.001
    assert [p.tgt for p in dist[-200:]] == [p.tgt for p in dist[:200]]
