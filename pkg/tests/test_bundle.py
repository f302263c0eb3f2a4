import numpy as np
import pytest

from mcc.bundle import BundleError, read_bundle, read_pfm, read_ppm, write_bundle, write_pfm, write_ppm
from mcc.synthdata import generate_scene, object_views, render_views


@pytest.fixture
def bundle(tmp_path):
    scene = generate_scene(4)
    frames = render_views(scene, object_views(3, image_size=16), noise=0.01, unknown_frac=0.2, seed=4)
    write_bundle(tmp_path, frames, scene)
    return tmp_path, frames, scene


def test_roundtrip(bundle):
    path, frames, scene = bundle
    back, scene2 = read_bundle(path)
    assert scene2 == scene and len(back) == len(frames)
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.depth.astype(np.float32), b.depth)
        np.testing.assert_array_equal(np.floor(a.image * 255 + 0.5) / 255, b.image)
        np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
        np.testing.assert_array_equal(a.pose.translation, b.pose.translation)
        assert a.intrinsics == b.intrinsics


def test_layout(bundle):
    path, frames, _ = bundle
    names = sorted(p.name for p in path.iterdir())
    assert names == sorted([f"frame_{i:04d}.{e}" for i in range(3) for e in ("ppm", "pfm", "cam")] + ["scene.txt"])
    cam = (path / "frame_0000.cam").read_text().splitlines()
    assert len(cam) == 4 and len(cam[0].split()) == 4 and all(len(l.split()) == 4 for l in cam[1:])


def test_missing_camera_names_frame(bundle):
    path, _, _ = bundle
    (path / "frame_0001.cam").unlink()
    with pytest.raises(BundleError, match="frame 1"):
        read_bundle(path)


def test_corrupt_depth_magic(bundle):
    path, _, _ = bundle
    p = path / "frame_0000.pfm"
    data = bytearray(p.read_bytes())
    data[:2] = b"PX"
    p.write_bytes(bytes(data))
    with pytest.raises(BundleError, match="frame_0000.pfm"):
        read_bundle(path)


def test_malformed_scene(bundle):
    path, _, _ = bundle
    (path / "scene.txt").write_text("# seed 1 mode object\nsphere 1 2\n")
    with pytest.raises(BundleError, match="scene.txt"):
        read_bundle(path)


def test_pfm_ppm_roundtrip(tmp_path):
    d = np.random.default_rng(0).uniform(0.1, 5, (7, 5)).astype(np.float32)
    d[2, 3] = np.nan
    write_pfm(tmp_path / "d.pfm", d)
    back = read_pfm(tmp_path / "d.pfm")
    np.testing.assert_array_equal(back, d)
    img = np.random.default_rng(1).integers(0, 256, (4, 6, 3)) / 255.0
    write_ppm(tmp_path / "i.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "i.ppm"), img)
