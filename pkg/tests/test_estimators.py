import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from narlab import (ARTranslator, DualXentFilter, EnsembleTranslator, NARTranslator, RuleBasedCleaner,
                    load_translator)
from narlab.corpus import SentencePair, gen_task


@pytest.fixture(scope="module")
def copy_data():
    d = gen_task("copy", 200, 20, 0, seed=4)
    return [p.src for p in d.train], [p.tgt for p in d.train], [p.src for p in d.dev]


def test_params_round_trip_through_clone():
    est = ARTranslator(preset="Small", beam_size=3, seed=7)
    params = est.get_params()
    assert params["preset"] == "Small" and params["beam_size"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert NARTranslator().set_params(split_factor=2).split_factor == 2
    with pytest.raises(ValueError):
        est.set_params(colour="blue")


@pytest.mark.parametrize("bad", ["one string", np.array([["a"], ["b"]]), [], ["ok", 3]])
def test_input_validation(bad):
    with pytest.raises((TypeError, ValueError)):
        ARTranslator(epochs=1).fit(bad, ["x"] * 2)


def test_length_mismatch_and_unfitted():
    with pytest.raises(ValueError, match="2 sources but 1 targets"):
        ARTranslator().fit(["a", "b"], ["c"])
    with pytest.raises(NotFittedError):
        ARTranslator().predict(["a"])


@pytest.mark.parametrize("cls", [ARTranslator, NARTranslator])
def test_fit_save_load_predict(cls, copy_data, tmp_path):
    X, y, Xd = copy_data
    est = cls(epochs=2, seed=3).fit(X, y, eval_set=(Xd, Xd))
    assert len(est.history_) == 2 and est.history_[-1].dev_loss is not None
    est.save(tmp_path / "m")
    back = load_translator(tmp_path / "m")
    assert type(back) is cls and back.get_params() == est.get_params()
    assert back.predict(Xd) == est.predict(Xd)
    assert back.predict(np.array(Xd)) == est.predict(Xd)
    assert 0.0 <= est.score(Xd, Xd) <= 100.0


def test_ar_cross_entropy_prefers_true_targets(lexicon_task, lexicon_pair_models):
    fwd, _ = lexicon_pair_models
    X = [p.src for p in lexicon_task.dev[:20]]
    y = [p.tgt for p in lexicon_task.dev[:20]]
    h = fwd.cross_entropy(X, y)
    assert h.shape == (20,) and (h > 0).all()
    assert (fwd.cross_entropy(X, y[1:] + y[:1]) > h).mean() >= 0.9


def test_ensemble_validation(copy_data):
    X, y, Xd = copy_data
    a = ARTranslator(epochs=1).fit(X, y)
    b = ARTranslator(epochs=1, seed=1).fit(X, y)
    ens = EnsembleTranslator([a, b], beam_size=2)
    outs, counter = ens.translate(Xd[:4])
    assert len(outs) == 4 and counter.decoder_invocations > 0
    with pytest.raises(ValueError):
        EnsembleTranslator([])
    with pytest.raises(TypeError):
        EnsembleTranslator([NARTranslator(epochs=1).fit(X, y)])
    other = ARTranslator(epochs=1).fit(["zz yy"] * 3, ["qq"] * 3)
    with pytest.raises(ValueError, match="vocabularies"):
        EnsembleTranslator([a, other])


def test_transformers_compose(copy_data):
    X, y, _ = copy_data
    fwd = ARTranslator(epochs=1).fit(X, y)
    bwd = ARTranslator(epochs=1, seed=1).fit(y, X)
    pairs = [(s, t) for s, t in zip(X[:12], y[:12])] + [("a b", "мир")]
    pipe = make_pipeline(RuleBasedCleaner(), DualXentFilter(fwd, bwd, keep_fraction=0.5))
    kept = pipe.fit_transform(pairs)
    assert len(kept) == 6 and all(isinstance(p, SentencePair) for p in kept)
    with pytest.raises(ValueError):
        DualXentFilter().fit(pairs)
    with pytest.raises(TypeError):
        RuleBasedCleaner().fit_transform(["not a pair"])


def test_lexicon_greedy_matches_ground_truth(lexicon_task, lexicon_pair_models):
    fwd, _ = lexicon_pair_models
    out = fwd.predict([p.src for p in lexicon_task.test])
    assert np.mean([o == p.tgt for o, p in zip(out, lexicon_task.test)]) >= 0.99
