import numpy as np
import pytest

from narlab import tensor as T
from narlab.corpus import BOS, EOS
from narlab.decoding import pad_sources
from narlab.model import (PRESETS, ModelConfig, TransformerModel, decode_ar, decode_ar_step, decode_nar, encode,
                          nar_forward, parameter_count, param_shapes, split_mask, split_states)
from gradcheck import check


def tiny(variant="AR", **kw):
    kw.setdefault("dtype", "f64")
    cfg = ModelConfig.from_preset("Tiny", variant, 12, 11 if variant == "AR" else 12, **kw)
    return TransformerModel.init(cfg, seed=1)


def batch(rows):
    return pad_sources(rows)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, 10, d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(10, 10, split_factor=0)
    with pytest.raises(ValueError):
        ModelConfig.from_preset("Huge", "AR", 10, 10)
    cfg = ModelConfig.from_preset("Small", "NAR", 10, 11, split_factor=2)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_preset_layer_counts_and_parameter_order():
    assert [PRESETS[p]["enc_layers"] for p in ("Large", "Base", "Small", "Micro", "Tiny")] == [6, 6, 3, 2, 1]
    for variant in ("AR", "NAR"):
        counts = [parameter_count(ModelConfig.from_preset(p, variant, 100, 101))
                  for p in ("Tiny", "Micro", "Small", "Base", "Large")]
        assert counts == sorted(counts) and len(set(counts)) == 5


def test_parameters_follow_variant():
    ar = param_shapes(ModelConfig.from_preset("Tiny", "AR", 10, 9))
    nar = param_shapes(ModelConfig.from_preset("Tiny", "NAR", 10, 9, split_factor=3))
    assert "tgt_emb" in ar and "split.w" not in ar
    assert nar["split.w"] == (32, 96) and "tgt_emb" not in nar
    assert nar["out.w"][1] == 9 and ar["out.w"][1] == 9


def test_encode_shapes_and_errors():
    m = tiny()
    ids, mask = batch([[]])
    assert encode(m, ids, mask).shape == (1, 2, 32)
    with pytest.raises(IndexError):
        encode(m, np.array([[1, 99]]), np.ones((1, 2), bool))
    with pytest.raises(ValueError):
        encode(m, np.ones((1, 300), dtype=int), np.ones((1, 300), bool))


def test_encode_batch_independence_and_padding_invariance():
    m = tiny()
    rows = [[5, 6, 7], [8], [5, 6, 7]]
    ids, mask = batch(rows)
    h = encode(m, ids, mask).data
    np.testing.assert_allclose(h[0], h[2], atol=1e-5)
    perm = [2, 0, 1]
    hp = encode(m, ids[perm], mask[perm]).data
    np.testing.assert_allclose(hp, h[perm], atol=1e-12)
    single_ids, single_mask = batch([[8]])
    np.testing.assert_allclose(encode(m, single_ids, single_mask).data[0], h[1, :3], atol=1e-5)


def test_split_states_identity_and_length():
    m = tiny("NAR", split_factor=1)
    m.params["split.w"] = T.Tensor(np.eye(32))
    m.params["split.b"] = T.Tensor(np.zeros(32))
    h = T.Tensor(np.random.default_rng(0).normal(size=(2, 4, 32)))
    np.testing.assert_array_equal(split_states(m, h).data, h.data)
    m3 = tiny("NAR", split_factor=3)
    assert split_states(m3, h).shape == (2, 12, 32)
    with pytest.raises(ValueError):
        split_states(m3, h, k=2)


def test_split_states_gradient():
    m = tiny("NAR", split_factor=3)
    w, b = m["split.w"].data, m["split.b"].data

    def f(h, w_, b_):
        m.params["split.w"], m.params["split.b"] = w_, b_
        return split_states(m, h)

    rng = np.random.default_rng(2)
    assert check(f, [rng.normal(size=(1, 2, 32)), w.copy(), b.copy()]) < 1e-4


def test_nar_decoder_is_non_causal_and_deterministic():
    m = tiny("NAR")
    ids, mask = batch([[5, 6, 7, 8]])
    h = encode(m, ids, mask)
    s = split_states(m, h)
    s_mask = split_mask(mask, 3)
    base = decode_nar(m, s, s_mask, h, mask).data
    assert base.shape == (1, 18, 12)
    again = decode_nar(m, s, s_mask, h, mask).data
    assert np.array_equal(base, again)
    bumped = s.data.copy()
    # a constant shift would vanish under layer norm
    bumped[0, -1] += np.random.default_rng(0).normal(size=32)
    changed = decode_nar(m, T.Tensor(bumped), s_mask, h, mask).data
    # the last state influences the first position
    assert np.abs(changed[0, 0] - base[0, 0]).max() > 1e-6


def test_ar_causality_and_cache_equivalence():
    m = tiny()
    rng = np.random.default_rng(4)
    ids, mask = batch([[5, 6, 7], [8, 9]])
    h = encode(m, ids, mask)
    prefix = np.concatenate([np.full((2, 1), BOS), rng.integers(5, 11, size=(2, 6))], axis=1)
    full = decode_ar(m, prefix, h, mask).data
    other = prefix.copy()
    other[:, 4:] = rng.integers(5, 11, size=(2, 3))
    np.testing.assert_allclose(decode_ar(m, other, h, mask).data[:, :4], full[:, :4], atol=1e-12)
    cache = None
    for t in range(1, prefix.shape[1] + 1):
        logits, cache = decode_ar_step(m, prefix[:, :t], h, mask, cache)
        np.testing.assert_allclose(logits, full[:, t - 1], atol=1e-5)
    first, _ = decode_ar_step(m, np.array([[BOS]]), T.Tensor(h.data[:1]), mask[:1])
    assert first.shape == (1, 11)


def test_cache_matches_full_recompute_in_f32():
    m = TransformerModel.init(ModelConfig.from_preset("Small", "AR", 12, 11), seed=3)
    ids, mask = batch([[5, 6, 7, 8, 9]])
    h = encode(m, ids, mask)
    prefix = np.array([[BOS, 5, 6, 7, EOS]])
    full = decode_ar(m, prefix, h, mask).data
    cache = None
    for t in range(1, 6):
        logits, cache = decode_ar_step(m, prefix[:, :t], h, mask, cache)
        np.testing.assert_allclose(logits, full[:, t - 1], atol=1e-5)


def test_whole_model_gradient_matches_finite_differences():
    m = tiny("NAR", split_factor=2)
    ids, mask = batch([[5, 6], [7]])
    names = ["src_emb", "split.w", "dec.0.cross.wq", "out.b"]

    def f(*tensors):
        for n, t in zip(names, tensors):
            m.params[n] = t
        logits, _ = nar_forward(m, ids, mask)
        return T.log_softmax(logits)

    assert check(f, [m[n].data.copy() for n in names]) < 1e-4


def test_save_load_round_trip(tmp_path):
    m = tiny("NAR")
    m.save(tmp_path / "ckpt")
    loaded = TransformerModel.load(tmp_path / "ckpt")
    assert loaded.config == m.config
    for k in m.params:
        assert loaded[k].data.tobytes() == m[k].data.tobytes()
