from dataclasses import replace

import numpy as np
import pytest

from freqasr.freq_transformer import FreqAttentionConfig
from freqasr.model import (ModelConfig, baseline_twin, build_baseline, build_model, build_proposed, count_params,
                           expected_param_count, full_scale_config, toy_config)
from freqasr.tensor import Tensor


def feats(B=2, n=13, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(B, n, 40)))


@pytest.mark.parametrize("variant", ["baseline", "proposed"])
@pytest.mark.parametrize("n", [10, 11, 26])
def test_shape_contract(variant, n):
    model = build_model(toy_config(variant, 32), 0)
    model.eval()
    logits, plens, _ = model(feats(2, n), [n, n - 2])
    assert logits.shape == (2, n // 2, 32)
    assert list(plens) == [n // 2, (n - 2) // 2]


def test_small_baseline_smoke():
    cfg = ModelConfig(variant="baseline", conv_channels=[4, 4, 4, 4], bilstm_hidden=8, vocab_size=6)
    model = build_baseline(cfg, 0)
    model.eval()
    logits, _, _ = model(feats())
    assert np.all(np.isfinite(logits.data))


def test_builders_check_variant():
    with pytest.raises(ValueError):
        build_baseline(toy_config("proposed"))
    with pytest.raises(ValueError):
        build_proposed(toy_config("baseline"))


def test_config_validation():
    with pytest.raises(ValueError):
        toy_config("proposed", conv_channels=[8, 8, 16, 16])
    with pytest.raises(ValueError):
        toy_config("hybrid")
    with pytest.raises(ValueError):
        toy_config("baseline", vocab_size=2)


def test_feature_dim_checked():
    model = build_model(toy_config("baseline"), 0)
    with pytest.raises(ValueError):
        model(Tensor(np.zeros((1, 10, 39))))


def test_full_scale_ordering_and_encoder_share():
    base, prop = full_scale_config("baseline"), full_scale_config("proposed")
    assert prop.freq_attention.param_count() == 13120
    assert expected_param_count(prop) < expected_param_count(base)
    assert count_params(build_model(prop, 0)) == expected_param_count(prop)


def test_runtime_count_matches_formula_for_random_configs():
    rng = np.random.default_rng(0)
    for i in range(10):
        variant = "proposed" if i % 2 else "baseline"
        d_model = int(rng.choice([4, 8]))
        ch = [int(rng.integers(1, 6)), d_model, int(rng.integers(1, 6)), int(rng.integers(1, 6))]
        kw = dict(conv_channels=ch, bilstm_hidden=int(rng.integers(2, 10)), vocab_size=int(rng.integers(3, 12)))
        if variant == "proposed":
            kw["freq_attention"] = FreqAttentionConfig(n_layers=int(rng.integers(1, 3)), n_heads=2,
                                                       d_model=d_model, d_ff=int(rng.integers(2, 9)))
        cfg = toy_config(variant, **kw)
        assert count_params(build_model(cfg, i)) == expected_param_count(cfg)


def test_identity_encoder_equals_baseline_wiring():
    cfg = toy_config("proposed", 32)
    ident = replace(cfg, freq_attention=replace(cfg.freq_attention, identity=True))
    prop = build_model(ident, 0)
    base = build_model(baseline_twin(ident), 0)
    shared = {k: v for k, v in prop.state_dict().items() if not k.startswith("freq.")}
    base.load_state_dict(shared)
    prop.eval()
    base.eval()
    x = feats(3, 17, seed=5)
    a, _, _ = prop(x, [17, 15, 9])
    b, _, _ = base(x, [17, 15, 9])
    assert a.data.tobytes() == b.data.tobytes()


def test_attention_maps_returned_on_request():
    model = build_model(toy_config("proposed", 32), 0)
    model.eval()
    _, _, maps = model(feats(1, 8), collect=True)
    assert maps.shape == (4, 1, 4, 4, 40, 40)
    base = build_model(toy_config("baseline", 32), 0)
    base.eval()
    assert base(feats(1, 8), collect=True)[2] is None


def test_state_dict_round_trip():
    a = build_model(toy_config("proposed", 32), 1)
    b = build_model(toy_config("proposed", 32), 2)
    b.load_state_dict(a.state_dict())
    a.eval()
    b.eval()
    x = feats()
    assert a(x)[0].data.tobytes() == b(x)[0].data.tobytes()
    with pytest.raises(ValueError):
        b.load_state_dict({"nope": np.zeros(1)})
