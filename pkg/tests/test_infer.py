import numpy as np
import pytest

from mcc.config import ConfigError
from mcc.experiments import synthetic_scene
from mcc.geometry import PointCloud, make_grid
from mcc.infer import PlyError, export_ply, import_ply, load_model, reconstruct
from mcc.model import MCC, ModelConfig
from mcc.train import TrainConfig, save_training_checkpoint
from mcc import nn as ops

SMALL = ModelConfig.desk(image_size=32)


@pytest.fixture(scope="module")
def setup():
    sd = synthetic_scene(2, n_views=4, image_size=32)
    inputs, _, transform = sd.example(0)
    return sd, inputs, transform


def test_full_grid_single_encode(setup):
    sd, inputs, transform = setup
    model = MCC(SMALL)
    rec = reconstruct(inputs, model, granularity=0.1, transform=transform)
    assert rec.n_queries == 226_981 and len(rec.sigma) == 226_981
    assert model.encode_calls == 1
    assert np.all((rec.sigma >= 0) & (rec.sigma <= 1))
    keep = rec.sigma > 0.1
    assert len(rec.cloud) == keep.sum()


def test_coincident_grid_points_bitwise(setup):
    _, inputs, transform = setup
    model = MCC(SMALL)
    coarse = reconstruct(inputs, model, granularity=0.4, transform=transform)
    fine = reconstruct(inputs, model, granularity=0.2, transform=transform)
    fine_sigma = fine.sigma.reshape(31, 31, 31)[::2, ::2, ::2].ravel()
    assert np.array_equal(coarse.sigma, fine_sigma)


def test_chunk_size_invariance(setup):
    _, inputs, transform = setup
    model = MCC(SMALL)
    a = reconstruct(inputs, model, granularity=0.5, transform=transform, chunk_size=1)
    b = reconstruct(inputs, model, granularity=0.5, transform=transform, chunk_size=100_000)
    assert np.array_equal(a.sigma, b.sigma)
    assert np.array_equal(a.cloud.positions, b.cloud.positions)
    assert np.array_equal(a.cloud.colors, b.cloud.colors)


def test_threshold_monotonic(setup):
    _, inputs, transform = setup
    model = MCC(SMALL)
    sizes = [len(reconstruct(inputs, model, granularity=0.5, threshold=t, transform=transform).cloud)
             for t in (0.05, 0.2, 0.4, 0.6, 0.95)]
    assert sizes == sorted(sizes, reverse=True)
    with pytest.raises(ValueError):
        reconstruct(inputs, model, granularity=0.5, threshold=1.0, transform=transform)
    with pytest.raises(ValueError):
        reconstruct(inputs, model, granularity=0.0, transform=transform)
    with pytest.raises(ValueError):
        reconstruct(inputs, model, granularity=0.5)


def test_scene_grid_excludes_camera_plane(setup):
    sd, _, _ = setup
    model = MCC(SMALL)
    rec = reconstruct(sd.frames[0], model, granularity=1.0, mode="scene")
    assert rec.n_queries == 13 * 13 * 6
    assert len(rec.cloud) == 0 or rec.cloud.positions[:, 2].min() > 0


def test_reconstruct_from_frame_and_path(setup, tmp_path):
    sd, _, _ = setup
    model = MCC(SMALL, seed=4)
    ckpt = tmp_path / "m.ckpt"
    save_training_checkpoint(ckpt, model, ops.AdamState.zeros_like(model.parameter_dict()), TrainConfig())
    a = reconstruct(sd.frames[0], model, granularity=0.5)
    b = reconstruct(sd.frames[0], ckpt, granularity=0.5)
    assert np.array_equal(a.sigma, b.sigma)
    np.testing.assert_allclose(a.denormalized().positions, a.transform.invert(a.cloud.positions))


def test_load_model_reports_config_diff(tmp_path):
    model = MCC(SMALL)
    ckpt = tmp_path / "m.ckpt"
    save_training_checkpoint(ckpt, model, ops.AdamState.zeros_like(model.parameter_dict()), TrainConfig())
    assert load_model(ckpt, expected=SMALL).cfg == SMALL
    with pytest.raises(ConfigError, match="dec_layers.*enc_dim|enc_dim.*dec_layers"):
        load_model(ckpt, expected=SMALL.replace(enc_dim=32, dec_layers=3))
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "none.ckpt")


def test_ply_single_point(tmp_path):
    path = tmp_path / "one.ply"
    export_ply(PointCloud(np.array([[0.1, -2.0, 3.5]]), np.array([[1.0, 0.0, 0.5]])), path)
    lines = path.read_text().splitlines()
    assert len(lines) == 11
    assert lines[0] == "ply" and lines[2] == "element vertex 1" and lines[9] == "end_header"
    assert lines[10] == "0.100000001 -2 3.5 255 0 128"


def test_ply_roundtrip_is_lossless(tmp_path, rng):
    pos = rng.normal(size=(300, 3)).astype(np.float32).astype(np.float64)
    cols = rng.integers(0, 256, (300, 3)) / 255.0
    path = tmp_path / "c.ply"
    export_ply(PointCloud(pos, cols), path)
    back = import_ply(path)
    assert np.array_equal(back.positions, pos)
    np.testing.assert_allclose(back.colors, cols, atol=1e-15)
    export_ply(back, tmp_path / "d.ply")
    assert (tmp_path / "d.ply").read_text() == path.read_text()


def test_ply_empty_cloud(tmp_path):
    path = tmp_path / "e.ply"
    export_ply(PointCloud(np.zeros((0, 3))), path)
    assert len(path.read_text().splitlines()) == 10
    assert len(import_ply(path)) == 0


def test_ply_errors(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text("plx\n")
    with pytest.raises(PlyError, match=":1:"):
        import_ply(path)
    good = tmp_path / "good.ply"
    export_ply(PointCloud(np.zeros((2, 3))), good)
    lines = good.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(PlyError, match="promises 2"):
        import_ply(path)
    path.write_text("\n".join(lines[:-1] + ["0 0 zero 0 0 0"]) + "\n")
    with pytest.raises(PlyError, match=":12:"):
        import_ply(path)
    path.write_text("\n".join(lines[:-1] + ["0 0 0 0 0 300"]) + "\n")
    with pytest.raises(PlyError, match=":12:"):
        import_ply(path)
    path.write_text("\n".join(lines[:3] + ["property double x"] + lines[4:]) + "\n")
    with pytest.raises(PlyError, match=":4:"):
        import_ply(path)


def test_grid_matches_reconstruction_positions(setup):
    _, inputs, transform = setup
    model = MCC(SMALL)
    rec = reconstruct(inputs, model, granularity=0.5, threshold=0.01, transform=transform)
    grid = make_grid([-3] * 3, [3] * 3, 0.5)
    assert np.array_equal(rec.cloud.positions, grid[rec.sigma > 0.01])
