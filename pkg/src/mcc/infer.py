"""Grid reconstruction from one RGB-D frame, and ASCII PLY import/export."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mcc import nn as ops
from mcc.config import ConfigError, load_configs
from mcc.geometry import NormalizationTransform, PointCloud, RgbdFrame, color_bin, fit_normalization, make_grid, unproject
from mcc.model import MCC, ModelConfig, ModelInputs, frame_inputs


class PlyError(ValueError):
    pass


def load_model(ckpt, expected: ModelConfig | None = None) -> MCC:
    """Build a model from ``ckpt`` and its ``.cfg`` sidecar.

    If ``expected`` is given, every differing field is reported in the error.
    """
    from mcc.train import TrainConfig, config_path

    ckpt = Path(ckpt)
    cfg_file = config_path(ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    if not cfg_file.exists():
        raise FileNotFoundError(f"checkpoint config {cfg_file} not found")
    mcfg, _ = load_configs(cfg_file, ModelConfig, TrainConfig)
    if expected is not None:
        diff = [f.name for f in dataclasses.fields(ModelConfig)
                if getattr(expected, f.name) != getattr(mcfg, f.name)]
        if diff:
            raise ConfigError(
                "checkpoint config differs in: "
                + ", ".join(f"{k} (checkpoint {getattr(mcfg, k)!r}, requested {getattr(expected, k)!r})"
                            for k in diff))
    params, _, _ = ops.load_checkpoint(ckpt)
    model = MCC(mcfg)
    model.load_parameters(params)
    model.eval()
    return model


@dataclass
class Reconstruction:
    cloud: PointCloud  # normalized coordinates
    transform: NormalizationTransform
    sigma: np.ndarray  # σ for every grid query
    n_queries: int

    def denormalized(self) -> PointCloud:
        return PointCloud(self.transform.invert(self.cloud.positions), self.cloud.colors)


def default_transform(frame: RgbdFrame, mode: str) -> NormalizationTransform:
    """Fallback normalization from the frame's own seen points."""
    seen, _ = unproject(frame, to_world=(mode == "object"))
    return fit_normalization(seen.positions, center=(mode == "object"))


def reconstruct(frame, model, granularity: float = 0.1, threshold: float | None = None,
                mode: str = "object", chunk_size: int = 2048,
                transform: NormalizationTransform | None = None) -> Reconstruction:
    """Predict occupancy and color on the mode's grid; keep σ strictly above ``threshold``.

    ``frame`` is an :class:`RgbdFrame` (normalized with ``transform``, or its
    own seen points when none is given) or ready-made :class:`ModelInputs`
    (``transform`` then required). ``model`` is an :class:`MCC` or a
    checkpoint path. The frame is encoded exactly once.
    """
    if not granularity > 0:
        raise ValueError(f"granularity must be positive, got {granularity}")
    if not isinstance(model, MCC):
        model = load_model(model)
    cfg = model.cfg
    threshold = cfg.occupancy_threshold if threshold is None else threshold
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(frame, ModelInputs):
        if transform is None:
            raise ValueError("ModelInputs need an explicit transform")
        inputs = frame
    else:
        transform = transform or default_transform(frame, mode)
        inputs = frame_inputs(frame, transform, mode)
    lo, hi = cfg.query_bounds(mode)
    grid = make_grid(lo, hi, granularity)
    if mode == "scene":
        grid = grid[grid[:, 2] > 0]
    sigma, colors, _ = model.predict(inputs, grid, chunk_size=chunk_size)
    keep = sigma > threshold
    return Reconstruction(PointCloud(grid[keep], colors[keep]), transform, sigma, len(grid))


PLY_HEADER = ("ply", "format ascii 1.0", "element vertex {n}", "property float x", "property float y",
              "property float z", "property uchar red", "property uchar green", "property uchar blue",
              "end_header")


def export_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY with float xyz and uchar rgb (colors quantized to 0..255)."""
    pos = cloud.positions
    cols = color_bin(cloud.colors) if cloud.colors is not None else np.zeros((len(pos), 3), np.int64)
    lines = [h.format(n=len(pos)) for h in PLY_HEADER]
    # 9 significant digits round-trip any float32
    lines += [f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}" for (x, y, z), (r, g, b) in
              zip(pos.astype(np.float32).tolist(), cols.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def import_ply(path) -> PointCloud:
    """Read a PLY written by :func:`export_ply`; errors name the offending line."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError(f"{path}:1: missing 'ply' magic")
    expected = list(PLY_HEADER)
    n = None
    for i, want in enumerate(expected):
        got = lines[i].strip() if i < len(lines) else None
        if i == 2:
            parts = got.split() if got else []
            if len(parts) != 3 or parts[:2] != ["element", "vertex"] or not parts[2].isdigit():
                raise PlyError(f"{path}:{i + 1}: expected 'element vertex N', got {got!r}")
            n = int(parts[2])
        elif got != want:
            raise PlyError(f"{path}:{i + 1}: expected {want!r}, got {got!r}")
    body = lines[len(expected):]
    if len(body) < n:
        raise PlyError(f"{path}: header promises {n} vertices, file has {len(body)}")
    pos = np.empty((n, 3))
    col = np.empty((n, 3), dtype=np.int64)
    for k in range(n):
        parts = body[k].split()
        lineno = len(expected) + k + 1
        if len(parts) != 6:
            raise PlyError(f"{path}:{lineno}: expected 6 values, got {len(parts)}")
        try:
            pos[k] = [float(v) for v in parts[:3]]
            col[k] = [int(v) for v in parts[3:]]
        except ValueError:
            raise PlyError(f"{path}:{lineno}: unreadable vertex {body[k]!r}") from None
        if np.any(col[k] < 0) or np.any(col[k] > 255):
            raise PlyError(f"{path}:{lineno}: color outside 0..255")
    if any(line.strip() for line in body[n:]):
        raise PlyError(f"{path}: data after the {n} declared vertices")
    if not np.all(np.isfinite(pos)):
        raise PlyError(f"{path}: non-finite vertex position")
    # values were written as float32; snap back so the roundtrip is exact
    return PointCloud(pos.astype(np.float32).astype(np.float64), col / 255.0)
