from dataclasses import replace

import numpy as np
import pytest

from fcbfuse import functional as F
from fcbfuse.metrics import binarize
from fcbfuse.models import (FCBConfig, Model, ModelConfig, fcb_forward, fcbformer_forward,
                            fcbformer_forward_without_fcb, init_params, param_shapes, ph_forward,
                            preset, ssformer_i_forward, subtree_count, tb_forward)
from fcbfuse.params import param_count
from fcbfuse.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def toy():
    cfg = preset("toy-64")
    return cfg, init_params(cfg, seed=0)


def image(n=1, hw=64, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, (n, 3, hw, hw)).astype(dtype))


def test_toy_shapes(toy):
    cfg, params = toy
    x = image(2)
    tb = tb_forward(x, cfg, params)
    fcb = fcb_forward(x, cfg, params)
    assert tb.shape == (2, 64, 16, 16)
    assert fcb.shape == (2, 32, 64, 64)
    assert ph_forward(tb, fcb, params).shape == (2, 1, 64, 64)
    assert fcbformer_forward(x, cfg, params).shape == (2, 1, 64, 64)


def test_indivisible_input_rejected(toy):
    cfg, params = toy
    with pytest.raises(ShapeError):
        tb_forward(image(1, 48), cfg, params)


def test_ph_ratio_mismatch(toy):
    _, params = toy
    with pytest.raises(ShapeError):
        ph_forward(Tensor(np.zeros((1, 64, 16, 16), np.float32)),
                   Tensor(np.zeros((1, 32, 32, 32), np.float32)), params)


def test_ph_zero_output_conv_gives_half_probability(toy):
    cfg, params = toy
    params = params.copy()
    params["ph.out.weight"].data[...] = 0
    logits = fcbformer_forward(image(), cfg, params)
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_array_equal(F.sigmoid(logits).data, 0.5)


def test_fcb_widths_double_and_halve():
    fc = FCBConfig(base_width=32)
    assert fc.encoder_widths() == [32, 32, 64, 64, 128]
    assert fc.decoder_widths() == [128, 64, 64, 32]
    shapes = param_shapes(preset("toy-64"))
    downs = [shapes[f"fcb.enc.{lvl}.rb.0.conv2.weight"][0] for lvl in range(5)]
    assert downs == [32, 32, 64, 64, 128]
    ups = [shapes[f"fcb.dec.{s}.rb.0.conv2.weight"][0] for s in range(4)]
    assert ups == [128, 64, 64, 32]


def test_pld_width_is_64_except_concat_points():
    for name in ("toy-64", "full-352"):
        for key, shape in param_shapes(preset(name)).items():
            if not key.startswith("tb.pld.") or len(shape) != 4:
                continue
            cout, cin = shape[:2]
            assert cout == 64, key
            if ".sfa." in key and key.endswith("conv1.weight"):
                assert cin == 128, key
            elif ".sfa." in key and key.endswith("skip.weight"):
                assert cin == 128, key
            elif ".le." in key and key.endswith("proj.weight"):
                continue
            else:
                assert cin == 64, key
    ph = param_shapes(preset("toy-64"))
    assert ph["ph.rb.0.conv1.weight"] == (64, 96, 3, 3)
    assert ph["ph.rb.1.conv2.weight"] == (64, 64, 3, 3)
    assert ph["ph.out.weight"] == (1, 64, 1, 1)


def test_b3_encoder_count_near_published_size():
    # the published B3 size counts strided-conv spatial reduction
    cfg = preset("full-352")
    b3 = replace(cfg, encoder=replace(cfg.encoder, sr_mode="conv"))
    count = subtree_count(param_shapes(b3), "tb.encoder")
    assert abs(count - 45.2e6) / 45.2e6 <= 0.02, count


def test_linear_sra_b3_encoder_count():
    # pooled reduction swaps each r x r SR conv for a 1x1 conv
    assert subtree_count(param_shapes(preset("full-352")), "tb.encoder") == 38_221_952


def test_param_count_matches_store(toy):
    cfg, params = toy
    assert param_count(params) == param_count(param_shapes(cfg))


def test_init_determinism():
    cfg = preset("toy-64")
    a, b, c = init_params(cfg, 5), init_params(cfg, 5), init_params(cfg, 6)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_init_std_matches_fan_in_target():
    params = init_params(preset("toy-64"), 1, np.float64)
    checked = 0
    for key in params:
        w = params[key].data
        if not key.endswith(".weight") or w.ndim < 2 or w.size < 10_000:
            continue
        fan_in = w.shape[0] if w.ndim == 2 else int(np.prod(w.shape[1:]))
        assert abs(w.std() * np.sqrt(fan_in) - 1.0) <= 0.1, key
        checked += w.size
    assert checked >= 10_000


def test_init_biases_and_norms(toy):
    _, params = toy
    np.testing.assert_array_equal(params["ph.out.bias"].data, 0)
    np.testing.assert_array_equal(params["ph.rb.0.gn1.weight"].data, 1)
    np.testing.assert_array_equal(params["ph.rb.0.gn1.bias"].data, 0)


def test_without_fcb_ignores_fcb_params(toy):
    cfg, params = toy
    x = image(2, seed=3)
    before = fcbformer_forward_without_fcb(x, cfg, params).data
    mutated = params.copy()
    rng = np.random.default_rng(9)
    for key in mutated:
        if key.startswith("fcb."):
            mutated[key].data[...] = rng.normal(size=mutated[key].shape)
    after = fcbformer_forward_without_fcb(x, cfg, mutated).data
    assert before.shape == (2, 1, 64, 64)
    assert before.tobytes() == after.tobytes()
    assert fcbformer_forward(x, cfg, mutated).data.tobytes() != after.tobytes()


def test_ssformer_i_quarter_logits_and_binary_eval():
    cfg = preset("toy-64", arch="ssformer-i")
    model = Model.create(cfg, seed=2)
    x = image()
    assert ssformer_i_forward(x, cfg, model.params).shape == (1, 1, 16, 16)
    prob = model.predict_proba(x.data)
    assert prob.shape == (1, 1, 64, 64)
    mask = binarize(prob)
    assert set(np.unique(mask)) <= {0, 1}
    assert not any(k.startswith(("fcb.", "ph.")) for k in model.params)
    with pytest.raises(ValueError):
        model.logits(x, ablate_fcb=True)


def test_ssformer_i_with_fcb_variant_is_full_size():
    cfg = preset("toy-64", arch="ssformer-i+fcb")
    model = Model.create(cfg, seed=2)
    assert model.logits(image()).shape == (1, 1, 64, 64)
    assert "tb.pld.sfa.fuse.0.weight" in model.params


def test_config_dict_round_trip():
    for name in ("toy-64", "full-352"):
        cfg = preset(name)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(input_hw=(50, 64))
    with pytest.raises(ValueError):
        ModelConfig(pld_width=32)
    with pytest.raises(ValueError):
        FCBConfig(n_down=4, n_up=3)
    with pytest.raises(KeyError):
        preset("huge")


@pytest.mark.slow
def test_full_352_shapes():
    cfg = preset("full-352")
    params = init_params(cfg, seed=0)
    x = image(1, 352)
    tb = tb_forward(x, cfg, params)
    assert tb.shape == (1, 64, 88, 88)
    logits = ph_forward(tb, fcb_forward(x, cfg, params), params)
    assert logits.shape == (1, 1, 352, 352)
