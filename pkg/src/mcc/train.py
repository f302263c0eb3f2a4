"""Query sampling, augmentation, the loss, and the training loop."""
from __future__ import annotations

import csv
import dataclasses
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from mcc import nn as ops
from mcc.bundle import read_bundle
from mcc.config import format_config
from mcc.geometry import (
    NormalizationTransform,
    PointCloud,
    build_gt_cloud,
    fit_normalization,
    label_queries,
    random_rotation,
)
from mcc.model import MCC, DecoderOutput, EncoderOutput, ModelConfig, ModelInputs, frame_inputs, stack_inputs

MODES = ("object", "scene")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_frac: float = 0.05
    total_steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    scale_min: float = 0.8
    scale_max: float = 1.2
    rotate: bool = True
    rotation_deg: float = 180.0
    color_weight: float = 0.1
    mode: str = "object"
    log_interval: int = 10
    checkpoint_interval: int = 500
    fixed_frame: int = -1  # >= 0 trains on that frame of every scene only
    augment: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be at least 1")
        if self.log_interval < 1 or self.checkpoint_interval < 1:
            raise ValueError("log_interval and checkpoint_interval must be at least 1")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"scale range must satisfy 0 < min <= max, got ({self.scale_min}, {self.scale_max})")
        if not 0 <= self.rotation_deg <= 180:
            raise ValueError(f"rotation_deg must lie in [0, 180], got {self.rotation_deg}")
        if not self.color_weight >= 0:
            raise ValueError(f"color_weight must be non-negative, got {self.color_weight}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def sample_queries(rng: np.random.Generator, n_q: int, mode: str, cfg: ModelConfig | None = None) -> np.ndarray:
    """Uniform queries over the mode's region: a cube for objects, a camera-facing box for scenes."""
    if n_q < 1:
        raise ValueError(f"n_q must be at least 1, got {n_q}")
    cfg = cfg or ModelConfig()
    lo, hi = cfg.query_bounds(mode)
    q = rng.uniform(lo, hi, size=(n_q, 3))
    if mode == "scene":
        # uniform() draws from [lo, hi); mirror z onto (0, r]
        q[:, 2] = hi[2] - q[:, 2]
    return q


def _resample_coords(size: int, s: float) -> np.ndarray:
    """Source coordinate for each output pixel under a zoom by ``s`` about the image center."""
    c = (size - 1) / 2.0
    return c + (np.arange(size, dtype=np.float64) - c) / s


def _bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear resample on the separable grid ``ys x xs``; samples off the image are 0."""
    h, w = image.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    out = np.zeros((len(ys), len(xs), image.shape[2]))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            oky = (yy >= 0) & (yy < h)
            okx = (xx >= 0) & (xx < w)
            vals = image[np.clip(yy, 0, h - 1)][:, np.clip(xx, 0, w - 1)]
            vals = vals * (oky[:, None, None] & okx[None, :, None])
            out += wy * wx * vals
    return np.clip(out, 0.0, 1.0)


def rescale_inputs(inputs: ModelInputs, s: float) -> ModelInputs:
    """Zoom the image (bilinear) and the point map (nearest) by ``s`` about the center.

    Point values are untouched; pixels falling outside the source become unknown.
    """
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    if s == 1.0:
        return inputs
    size = inputs.valid.shape[0]
    src = _resample_coords(size, s)
    image = _bilinear(inputs.image, src, src)
    near = np.floor(src + 0.5).astype(np.int64)
    inside = (near >= 0) & (near < size)
    idx = np.clip(near, 0, size - 1)
    valid = inputs.valid[idx][:, idx] & inside[:, None] & inside[None, :]
    points = np.where(valid[..., None], inputs.points[idx][:, idx], 0.0)
    return ModelInputs(image, points, valid)


def augment(inputs: ModelInputs, gt: PointCloud, rng: np.random.Generator, cfg: TrainConfig):
    """Random spatial zoom plus one rotation applied jointly to seen points and GT.

    Returns (inputs, gt, rotation). With augmentation off, or s = 1 and a
    zero rotation range, the inputs come back unchanged.
    """
    if not cfg.augment:
        return inputs, gt, np.eye(3)
    s = float(rng.uniform(cfg.scale_min, cfg.scale_max)) if cfg.scale_max > cfg.scale_min else cfg.scale_min
    out = rescale_inputs(inputs, s)
    if not cfg.rotate or cfg.rotation_deg == 0:
        return out, gt, np.eye(3)
    r = cfg.rotation_deg
    rot = random_rotation(rng, ((-r, r),) * 3)
    points = np.where(out.valid[..., None], out.points @ rot.T, 0.0)
    return ModelInputs(out.image, points, out.valid), PointCloud(gt.positions @ rot.T, gt.colors), rot


def compute_loss(pred: DecoderOutput, occupied: torch.Tensor, bins: torch.Tensor, color_weight: float):
    """(total, occupancy BCE, color CE) where color CE covers occupied queries only."""
    if occupied.shape != pred.occupancy_logits.shape or bins.shape != pred.color_logits.shape[:-1]:
        raise ValueError(
            f"labels {tuple(occupied.shape)}/{tuple(bins.shape)} do not match predictions "
            f"{tuple(pred.occupancy_logits.shape)}/{tuple(pred.color_logits.shape)}")
    occ = ops.bce_with_logits(pred.occupancy_logits, occupied)
    if bool(occupied.any()):
        color = ops.softmax_cross_entropy(pred.color_logits[occupied], bins[occupied])
    else:
        color = torch.zeros((), dtype=occ.dtype)
    total = occ + color_weight * color if color_weight > 0 else occ
    return total, occ, color


@dataclass
class Batch:
    image: torch.Tensor  # [U, S, S, 3], one row per distinct input
    points: torch.Tensor
    valid: torch.Tensor
    queries: torch.Tensor  # [B, N, 3]
    occupied: torch.Tensor
    bins: torch.Tensor
    source: torch.Tensor  # [B] row of the encoder input used by each example


def make_batch(examples, dtype=torch.float32) -> Batch:
    """``examples``: list of (ModelInputs, queries, occupied, bins).

    Examples that share the same ModelInputs object (fixed frame, no
    augmentation) are encoded once.
    """
    unique, source = [], []
    for inputs, *_ in examples:
        for i, u in enumerate(unique):
            if u is inputs:
                source.append(i)
                break
        else:
            source.append(len(unique))
            unique.append(inputs)
    image, points, valid = stack_inputs(unique, dtype)
    return Batch(image, points, valid,
                 torch.as_tensor(np.stack([e[1] for e in examples]), dtype=dtype),
                 torch.as_tensor(np.stack([e[2] for e in examples])),
                 torch.as_tensor(np.stack([e[3] for e in examples])),
                 torch.as_tensor(source))


def train_step(model: MCC, batch: Batch, state: ops.AdamState, lr: float, color_weight: float):
    """One forward/backward/Adam update. Returns (loss, occ_loss, color_loss) as floats."""
    model.zero_grad(set_to_none=True)
    enc = model.encode(batch.image, batch.points, batch.valid)
    pred = model.decode(EncoderOutput(enc.R[batch.source]), batch.queries)
    total, occ, color = compute_loss(pred, batch.occupied, batch.bins, color_weight)
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step + 1}: occupancy {occ.item()}, color {color.item()}")
    total.backward()
    params = model.parameter_dict()
    ops.adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
    return total.item(), occ.item(), color.item()


class SceneData:
    """One bundle prepared for training: frames, the full GT cloud and per-frame views of it.

    Object mode normalizes the GT once per scene. Per-frame examples are kept
    in a small LRU cache so that a fixed input frame yields the same object
    (and is encoded once per batch) without holding every frame of a large
    dataset in memory.
    """

    cache_size = 8

    def __init__(self, frames, scene, mode: str):
        self.frames = frames
        self.scene = scene
        self.mode = mode
        self.gt_world = build_gt_cloud(frames)
        self._object_norm = None
        self._object_gt = None
        if mode == "object":
            self._object_norm = fit_normalization(self.gt_world.positions)
            self._object_gt = PointCloud(self._object_norm.apply(self.gt_world.positions), self.gt_world.colors)
        self._cache = OrderedDict()

    def __len__(self) -> int:
        return len(self.frames)

    def transform(self, idx: int) -> NormalizationTransform:
        return self.example(idx)[2]

    def example(self, idx: int):
        """(ModelInputs, normalized GT cloud, NormalizationTransform) for input frame ``idx``."""
        if idx in self._cache:
            self._cache.move_to_end(idx)
            return self._cache[idx]
        if self.mode == "object":
            t = self._object_norm
            out = (frame_inputs(self.frames[idx], t, "object"), self._object_gt, t)
        else:
            out = scene_example(self.frames[idx], self.gt_world, self.mode)
        self._cache[idx] = out
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return out


def bundle_dirs(data_dir) -> list:
    """Bundles listed in ``manifest.txt`` (first column), else every subdirectory with a scene.txt."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if manifest.exists():
        dirs = []
        for line in manifest.read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                p = Path(line.split()[0])
                dirs.append(p if p.is_absolute() else data_dir / p)
    elif (data_dir / "scene.txt").exists():
        dirs = [data_dir]
    else:
        dirs = sorted(p for p in data_dir.iterdir() if (p / "scene.txt").exists())
    if not dirs:
        raise FileNotFoundError(f"{data_dir}: no scene bundles found")
    return dirs


def load_scenes(data_dir, mode: str) -> list:
    scenes = []
    for d in bundle_dirs(data_dir):
        frames, scene = read_bundle(d)
        scenes.append(SceneData(frames, scene, mode))
    return scenes


def draw_examples(scenes, rng: np.random.Generator, tcfg: TrainConfig, mcfg: ModelConfig):
    """Sample one training batch: scene, input frame, augmentation, queries and labels."""
    drawn = []
    for _ in range(tcfg.batch_size):
        sd = scenes[int(rng.integers(len(scenes)))]
        if tcfg.fixed_frame >= 0:
            if tcfg.fixed_frame >= len(sd):
                raise IndexError(f"fixed_frame {tcfg.fixed_frame} but scene has {len(sd)} frames")
            idx = tcfg.fixed_frame
        else:
            idx = int(rng.integers(len(sd)))
        inputs, gt, _ = sd.example(idx)
        inputs, gt, _ = augment(inputs, gt, rng, tcfg)
        drawn.append((inputs, gt, sample_queries(rng, mcfg.n_queries_train, tcfg.mode, mcfg)))
    # examples sharing a GT cloud (no augmentation) are labeled with one search structure
    labels = {}
    for gt in {id(g): g for _, g, _ in drawn}.values():
        rows = [i for i, d in enumerate(drawn) if d[1] is gt]
        occ, bins = label_queries(np.concatenate([drawn[i][2] for i in rows]), gt, mcfg.tau)
        n = mcfg.n_queries_train
        for k, i in enumerate(rows):
            labels[i] = (occ[k * n:(k + 1) * n], bins[k * n:(k + 1) * n])
    return [(inputs, q, *labels[i]) for i, (inputs, _, q) in enumerate(drawn)]


LOG_HEADER = ["step", "lr", "loss", "occ_loss", "color_loss"]


def config_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".cfg")


def log_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".log.csv")


def save_training_checkpoint(path, model: MCC, state: ops.AdamState, tcfg: TrainConfig) -> None:
    ops.save_checkpoint(path, model.parameter_dict(), state.step, state)
    config_path(path).write_text(format_config(model.cfg, tcfg))


def _write_log(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_HEADER)
        w.writerows(rows)


def _read_log(path: Path, upto: int) -> list:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return [r for r in rows if int(r[0]) <= upto]


def train_loop(data, tcfg: TrainConfig, mcfg: ModelConfig, ckpt_path, resume=None,
               log_file=None, progress=None) -> MCC:
    """Train and write ``ckpt_path`` (+ .cfg sidecar) and a CSV loss log.

    ``data`` is a bundle directory or a list of :class:`SceneData`. Every
    step draws from ``default_rng([seed, step])``, so resuming from a
    checkpoint replays the exact batches of an uninterrupted run.
    """
    scenes = load_scenes(data, tcfg.mode) if isinstance(data, (str, Path)) else list(data)
    if not scenes:
        raise ValueError("no training scenes")
    torch.manual_seed(tcfg.seed)
    model = MCC(mcfg, seed=tcfg.seed)
    state = ops.AdamState.zeros_like(model.parameter_dict())
    prior_log = Path(log_file) if log_file else (log_path(resume) if resume is not None else None)
    log_file = Path(log_file) if log_file else log_path(ckpt_path)
    rows = []
    if resume is not None:
        params, step, state = ops.load_checkpoint(resume)
        model.load_parameters(params)
        own = model.parameter_dict()
        if set(state.m) != set(own):
            raise ValueError(f"{resume}: optimizer state does not cover the model parameters")
        rows = _read_log(prior_log, step)
    start = state.step
    for step in range(start + 1, tcfg.total_steps + 1):
        rng = np.random.default_rng([tcfg.seed, step])
        batch = make_batch(draw_examples(scenes, rng, tcfg, mcfg))
        lr = ops.cosine_lr(step, tcfg.total_steps, tcfg.warmup_frac, tcfg.lr)
        loss, occ, color = train_step(model, batch, state, lr, tcfg.color_weight)
        if step % tcfg.log_interval == 0:
            rows.append([step, repr(lr), repr(loss), repr(occ), repr(color)])
            if progress:
                progress(step, lr, loss, occ, color)
        if step % tcfg.checkpoint_interval == 0 or step == tcfg.total_steps:
            save_training_checkpoint(ckpt_path, model, state, tcfg)
            _write_log(log_file, rows)
    if start >= tcfg.total_steps:
        save_training_checkpoint(ckpt_path, model, state, tcfg)
        _write_log(log_file, rows)
    return model

