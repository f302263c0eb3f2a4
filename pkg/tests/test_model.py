import numpy as np
import pytest
import torch

from mcc.model import MCC, ModelConfig, ModelInputs, build_decoder_mask, frame_inputs
from mcc.selftest import independence_trial, mask_oracle

MODES = [dict(), dict(conditioning="global"), dict(decoder_mode="cross_attn"), dict(use_rgb=False)]


def _inputs(s, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(1, s, s, 3, generator=g).to(dtype), torch.randn(1, s, s, 3, generator=g).to(dtype),
            torch.rand(1, s, s, generator=g) > 0.3)


def test_config_presets_and_validation():
    desk, paper = ModelConfig.desk(), ModelConfig.paper()
    assert (desk.image_size, desk.patch_size, desk.enc_dim, desk.dec_layers) == (64, 8, 64, 2)
    assert (paper.image_size, paper.patch_size, paper.enc_dim, paper.enc_layers) == (224, 16, 768, 12)
    assert (paper.dec_dim, paper.dec_layers, paper.dec_heads, paper.n_queries_train) == (512, 8, 16, 550)
    for bad in (dict(image_size=60), dict(enc_heads=3), dict(conditioning="pooled"),
                dict(decoder_mode="mlp"), dict(tau=0.0), dict(color_bins=128)):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


def test_token_counts():
    assert ModelConfig.desk().n_enc == 65
    assert ModelConfig.paper().n_enc == 197
    model = MCC(ModelConfig.desk(image_size=32))
    with torch.no_grad():
        enc = model.encode(*_inputs(32))
    assert enc.R.shape == (1, 17, 64)


def test_mask_table():
    for n_enc in range(1, 9):
        for n_q in range(1, 9):
            np.testing.assert_array_equal(build_decoder_mask(n_enc, n_q), mask_oracle(n_enc, n_q))
    m = build_decoder_mask(2, 2)
    assert m[3].tolist() == [True, True, True, True, False]
    assert m[0].tolist() == [True, True, True, False, False]
    with pytest.raises(ValueError):
        build_decoder_mask(0, 1)


@pytest.mark.parametrize("mode", MODES, ids=["default", "global", "cross_attn", "no_rgb"])
def test_query_independence(mode):
    model = MCC(ModelConfig.desk(image_size=32, query_block=16, **mode), seed=3)
    for t in range(5):
        assert independence_trial(model, t)


@pytest.mark.parametrize("mode", [MODES[0], MODES[1], MODES[3]], ids=["default", "global", "no_rgb"])
def test_blocked_decoder_matches_dense(mode):
    model = MCC(ModelConfig.desk(image_size=32, query_block=8, **mode), seed=2).double()
    with torch.no_grad():
        enc = model.encode(*_inputs(32, dtype=torch.float64))
        q = torch.randn(1, 21, 3, dtype=torch.float64)
        a, b = model.decode(enc, q), model.decode_dense(enc, q)
    assert (a.occupancy_logits - b.occupancy_logits).abs().max() < 1e-10
    assert (a.color_logits - b.color_logits).abs().max() < 1e-10


def test_dense_reference_rejects_cross_attn():
    model = MCC(ModelConfig.desk(image_size=32, decoder_mode="cross_attn"))
    with pytest.raises(ValueError):
        model.decode_dense(model.encode(*_inputs(32)), torch.zeros(1, 2, 3))


def test_output_shapes():
    model = MCC(ModelConfig.desk(image_size=32))
    with torch.no_grad():
        out = model(*_inputs(32), torch.zeros(1, 5, 3))
    assert out.occupancy_logits.shape == (1, 5)
    assert out.color_logits.shape == (1, 5, 3, 256)


def test_no_rgb_ignores_image():
    model = MCC(ModelConfig.desk(image_size=32, use_rgb=False))
    image, points, valid = _inputs(32)
    q = torch.randn(1, 7, 3)
    with torch.no_grad():
        a = model(image, points, valid, q)
        b = model(torch.rand(1, 32, 32, 3), points, valid, q)
    assert torch.equal(a.occupancy_logits, b.occupancy_logits)
    assert not any("rgb" in n for n in model.parameter_dict())


def test_invalid_pixel_values_do_not_matter():
    model = MCC(ModelConfig.desk(image_size=32))
    image, points, valid = _inputs(32)
    junk = torch.where(valid[..., None], points, torch.full_like(points, 1e3))
    q = torch.randn(1, 7, 3)
    with torch.no_grad():
        a = model(image, points, valid, q)
        b = model(image, junk, valid, q)
    assert torch.equal(a.occupancy_logits, b.occupancy_logits)
    assert torch.equal(a.color_logits, b.color_logits)


def test_all_invalid_frame_is_finite():
    model = MCC(ModelConfig.desk(image_size=32)).double()
    image, points, _ = _inputs(32, dtype=torch.float64)
    with torch.no_grad():
        out = model(image, points, torch.zeros(1, 32, 32, dtype=torch.bool), torch.zeros(1, 3, 3, dtype=torch.float64))
    assert torch.isfinite(out.occupancy_logits).all()


def test_zero_heads_give_half():
    model = MCC(ModelConfig.desk(image_size=32))
    for name, p in model.parameter_dict().items():
        if name.startswith(("decoder.occupancy.", "decoder.color.")):
            torch.nn.init.zeros_(p.data)
    inputs = ModelInputs(np.zeros((32, 32, 3)), np.zeros((32, 32, 3)), np.ones((32, 32), bool))
    sigma, colors, _ = model.predict(inputs, np.zeros((4, 3)))
    assert np.all(sigma == 0.5)
    np.testing.assert_array_equal(colors, 0.0)


def test_predict_reuses_encoding():
    model = MCC(ModelConfig.desk(image_size=32))
    inputs = ModelInputs(np.zeros((32, 32, 3)), np.zeros((32, 32, 3)), np.ones((32, 32), bool))
    sigma, _, enc = model.predict(inputs, np.zeros((10, 3)), chunk_size=3)
    assert model.encode_calls == 1
    again, _, _ = model.predict(inputs, np.zeros((10, 3)), enc=enc)
    assert model.encode_calls == 1
    assert np.array_equal(sigma, again)
    with pytest.raises(ValueError):
        model.predict(inputs, np.zeros((0, 3)))


def test_seed_determinism_and_parameter_io():
    a, b = MCC(ModelConfig.desk(image_size=32), seed=5), MCC(ModelConfig.desk(image_size=32), seed=5)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = MCC(ModelConfig.desk(image_size=32), seed=6)
    c.load_parameters(a.parameter_dict())
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
    params = dict(a.parameter_dict())
    params.pop(next(iter(params)))
    with pytest.raises(ValueError, match="missing"):
        c.load_parameters(params)


def test_input_shape_errors():
    model = MCC(ModelConfig.desk(image_size=32))
    image, points, valid = _inputs(16)
    with pytest.raises(ValueError, match="image_size 32"):
        model.encode(image, points, valid)
    enc = model.encode(*_inputs(32))
    with pytest.raises(ValueError):
        model.decode(enc, torch.zeros(1, 4, 2))
    with pytest.raises(ValueError):
        model.decode(enc, torch.zeros(1, 0, 3))


def test_frame_inputs_zero_invalid(object_scene):
    frame = object_scene.frames[0]
    inputs = frame_inputs(frame, object_scene.transform(0), "object")
    assert inputs.points.shape == (64, 64, 3)
    assert np.all(inputs.points[~inputs.valid] == 0)
    assert inputs.valid.sum() > 0
    with pytest.raises(ValueError):
        frame_inputs(frame, object_scene.transform(0), "room")
