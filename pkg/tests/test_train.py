import csv
import math
import shutil

import numpy as np
import pytest
import torch

from mcc import nn as ops
from mcc.experiments import synthetic_scene
from mcc.geometry import PointCloud, label_queries
from mcc.model import MCC, DecoderOutput, EncoderOutput, ModelConfig, ModelInputs
from mcc.train import (
    LOG_HEADER,
    NonFiniteLossError,
    TrainConfig,
    augment,
    compute_loss,
    config_path,
    draw_examples,
    log_path,
    make_batch,
    rescale_inputs,
    sample_queries,
    train_loop,
    train_step,
)

SMALL = ModelConfig.desk(image_size=32, n_queries_train=32)


@pytest.fixture(scope="module")
def small_scene():
    return synthetic_scene(1, n_views=4, image_size=32)


def _tcfg(**changes):
    base = dict(total_steps=6, batch_size=2, log_interval=1, checkpoint_interval=3, lr=1e-3)
    base.update(changes)
    return TrainConfig(**base)


def test_train_config_validation():
    for bad in (dict(lr=0.0), dict(warmup_frac=1.0), dict(batch_size=0), dict(scale_min=1.3),
                dict(rotation_deg=200.0), dict(color_weight=-1.0), dict(mode="room")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_query_sampling_ranges(rng):
    q = sample_queries(rng, 20_000, "object")
    assert q.shape == (20_000, 3) and q.min() >= -3 and q.max() < 3
    s = sample_queries(rng, 20_000, "scene")
    assert np.abs(s[:, :2]).max() <= 6 and s[:, 2].min() > 0 and s[:, 2].max() <= 6
    a = sample_queries(np.random.default_rng(4), 10, "object")
    assert np.array_equal(a, sample_queries(np.random.default_rng(4), 10, "object"))
    with pytest.raises(ValueError):
        sample_queries(rng, 0, "object")


def _toy_inputs(rng, size=16):
    valid = rng.uniform(size=(size, size)) > 0.2
    pts = np.where(valid[..., None], rng.normal(size=(size, size, 3)), 0.0)
    return ModelInputs(rng.uniform(size=(size, size, 3)), pts, valid)


def test_augment_identity(rng):
    inputs = _toy_inputs(rng)
    gt = PointCloud(rng.normal(size=(50, 3)))
    cfg = TrainConfig(scale_min=1.0, scale_max=1.0, rotation_deg=0.0)
    out, gt2, rot = augment(inputs, gt, rng, cfg)
    assert out is inputs and gt2 is gt and np.array_equal(rot, np.eye(3))
    out, gt2, _ = augment(inputs, gt, rng, TrainConfig(augment=False))
    assert out is inputs and gt2 is gt
    assert rescale_inputs(inputs, 1.0) is inputs


def test_augment_rotation_is_joint_isometry(rng):
    inputs = _toy_inputs(rng)
    gt = PointCloud(rng.normal(size=(60, 3)), rng.uniform(size=(60, 3)))
    out, gt2, rot = augment(inputs, gt, rng, TrainConfig(scale_min=1.0, scale_max=1.0))
    assert np.array_equal(out.valid, inputs.valid)
    np.testing.assert_allclose(out.points[out.valid], inputs.points[inputs.valid] @ rot.T, atol=1e-12)
    assert np.all(out.points[~out.valid] == 0)
    np.testing.assert_allclose(gt2.positions, gt.positions @ rot.T, atol=1e-12)
    np.testing.assert_array_equal(gt2.colors, gt.colors)
    q = rng.uniform(-2, 2, (500, 3))
    d = np.sqrt(((q[:, None] - gt.positions[None]) ** 2).sum(-1)).min(1)
    q = q[np.abs(d - 0.3) > 1e-9]
    a = label_queries(q, gt, 0.3)
    b = label_queries(q @ rot.T, gt2, 0.3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_rescale_keeps_point_values(rng):
    inputs = _toy_inputs(rng, 32)
    zoom = rescale_inputs(inputs, 1.2)
    assert zoom.image.shape == (32, 32, 3) and zoom.points.shape == (32, 32, 3)
    src = {tuple(p) for p in inputs.points[inputs.valid]}
    assert all(tuple(p) in src for p in zoom.points[zoom.valid])
    small = rescale_inputs(inputs, 0.8)
    assert not small.valid[0].any() and not small.valid[:, 0].any()
    assert small.image.min() >= 0 and small.image.max() <= 1
    with pytest.raises(ValueError):
        rescale_inputs(inputs, 0.0)


def _pred(occ, col):
    return DecoderOutput(torch.as_tensor(occ, dtype=torch.float64), torch.as_tensor(col, dtype=torch.float64))


def test_loss_examples():
    pred = _pred(np.zeros((1, 2)), np.zeros((1, 2, 3, 256)))
    occupied = torch.tensor([[True, False]])
    bins = torch.tensor([[[1, 2, 3], [0, 0, 0]]])
    total, occ, color = compute_loss(pred, occupied, bins, 0.1)
    assert occ.item() == pytest.approx(math.log(2), abs=1e-12)
    assert color.item() == pytest.approx(math.log(256), abs=1e-12)
    assert total.item() == pytest.approx(math.log(2) + 0.1 * math.log(256), abs=1e-12)
    none = compute_loss(pred, torch.zeros(1, 2, dtype=torch.bool), bins, 0.1)
    assert none[2].item() == 0 and none[0].item() == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        compute_loss(pred, torch.zeros(1, 3, dtype=torch.bool), bins, 0.1)


def test_color_loss_ignores_unoccupied():
    col = np.zeros((1, 2, 3, 256))
    col[0, 1] = np.random.default_rng(0).normal(size=(3, 256)) * 10
    occupied = torch.tensor([[True, False]])
    bins = torch.tensor([[[1, 2, 3], [4, 5, 6]]])
    a = compute_loss(_pred(np.zeros((1, 2)), np.zeros((1, 2, 3, 256))), occupied, bins, 1.0)[2]
    b = compute_loss(_pred(np.zeros((1, 2)), col), occupied, bins, 1.0)[2]
    assert a.item() == b.item()


def test_zero_color_weight_gives_zero_color_head_gradient(small_scene):
    model = MCC(SMALL)
    batch = make_batch(draw_examples([small_scene], np.random.default_rng(0), _tcfg(), SMALL))
    enc = model.encode(batch.image, batch.points, batch.valid)
    pred = model.decode(EncoderOutput(enc.R[batch.source]), batch.queries)
    compute_loss(pred, batch.occupied, batch.bins, 0.0)[0].backward()
    assert model.decoder.color.weight.grad is None or torch.all(model.decoder.color.weight.grad == 0)
    assert model.decoder.occupancy.weight.grad.abs().max() > 0


def test_non_finite_loss_raises(small_scene):
    model = MCC(SMALL)
    batch = make_batch(draw_examples([small_scene], np.random.default_rng(0), _tcfg(), SMALL))
    batch.points[:] = float("nan")
    batch.valid[:] = True
    with pytest.raises(NonFiniteLossError, match="step 1"):
        train_step(model, batch, ops.AdamState(), 1e-3, 0.1)


def test_train_step_reduces_loss_on_fixed_batch(small_scene):
    model = MCC(SMALL)
    batch = make_batch(draw_examples([small_scene], np.random.default_rng(0), _tcfg(), SMALL))
    state = ops.AdamState()
    first = train_step(model, batch, state, 1e-3, 0.1)[0]
    for _ in range(20):
        last = train_step(model, batch, state, 1e-3, 0.1)[0]
    assert last < first and state.step == 21


def test_shared_inputs_are_encoded_once(small_scene):
    tcfg = _tcfg(augment=False, fixed_frame=0, batch_size=4)
    examples = draw_examples([small_scene], np.random.default_rng(0), tcfg, SMALL)
    batch = make_batch(examples, torch.float64)
    assert batch.image.shape[0] == 1 and batch.source.tolist() == [0, 0, 0, 0]
    model = MCC(SMALL).double()
    image, points, valid = (t.expand(4, *t.shape[1:]) for t in (batch.image, batch.points, batch.valid))
    with torch.no_grad():
        full = compute_loss(model(image, points, valid, batch.queries), batch.occupied, batch.bins, 0.1)[0]
    shared = train_step(model, batch, ops.AdamState(), 1e-3, 0.1)[0]
    assert model.encode_calls == 2
    assert abs(shared - full.item()) < 1e-12


def _params(model):
    return {k: v.detach().clone() for k, v in model.parameter_dict().items()}


def test_seeded_runs_are_bitwise_identical(small_scene, tmp_path):
    a = train_loop([small_scene], _tcfg(total_steps=3), SMALL, tmp_path / "a.ckpt")
    b = train_loop([small_scene], _tcfg(total_steps=3), SMALL, tmp_path / "b.ckpt")
    pa, pb = _params(a), _params(b)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    c = train_loop([small_scene], _tcfg(total_steps=3, seed=1), SMALL, tmp_path / "c.ckpt")
    assert not all(torch.equal(pa[k], v) for k, v in _params(c).items())


def test_resume_is_bitwise(small_scene, tmp_path):
    full = tmp_path / "full.ckpt"
    mid = tmp_path / "mid.ckpt"

    def snapshot(step, *_):
        if step == 4:  # the step-3 checkpoint is on disk, step 6 not yet written
            for src, dst in ((full, mid), (config_path(full), config_path(mid)), (log_path(full), log_path(mid))):
                shutil.copy(src, dst)

    train_loop([small_scene], _tcfg(), SMALL, full, progress=snapshot)
    assert ops.load_checkpoint(mid)[1] == 3
    train_loop([small_scene], _tcfg(), SMALL, tmp_path / "resumed.ckpt", resume=mid)
    assert full.read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()
    assert log_path(full).read_text() == log_path(tmp_path / "resumed.ckpt").read_text()


def test_log_and_sidecars(small_scene, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    train_loop([small_scene], _tcfg(total_steps=4, log_interval=2), SMALL, ckpt)
    with open(log_path(ckpt), newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == LOG_HEADER
    assert [int(r[0]) for r in rows[1:]] == [2, 4]
    assert all(math.isfinite(float(v)) for r in rows[1:] for v in r)
    text = config_path(ckpt).read_text()
    assert "image_size = 32" in text and "total_steps = 4" in text
    params, step, state = ops.load_checkpoint(ckpt)
    assert step == 4 and state.step == 4 and set(state.m) == set(params)


def test_fixed_frame_out_of_range(small_scene, tmp_path):
    with pytest.raises(IndexError):
        train_loop([small_scene], _tcfg(fixed_frame=10), SMALL, tmp_path / "x.ckpt")
