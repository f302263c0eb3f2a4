"""Camera model, unprojection, rigid transforms and occupancy labelling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mcc.neighbors import radius_grid

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        """Square pixels, horizontal field of view ``fov_deg``, centred principal point."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    def scaled(self, s: float, width: int, height: int) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s, width, height)


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform: ``x_world = rotation @ x_cam + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_rotation(r)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])


def check_rotation(r: np.ndarray, tol: float = _ORTHO_TOL) -> None:
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("rotation determinant is not +1")


@dataclass
class RgbdFrame:
    """One posed RGB-D view. Unknown depth is marked with NaN."""

    image: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.image.shape != (h, w, 3):
            raise ValueError(f"image shape {self.image.shape} does not match intrinsics ({h}, {w}, 3)")
        if self.depth.shape != (h, w):
            raise ValueError(f"depth shape {self.depth.shape} does not match intrinsics ({h}, {w})")
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        finite = np.isfinite(self.depth)
        if np.any(self.depth[finite] <= 0):
            raise ValueError("finite depth values must be positive")


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.positions):
                raise ValueError(
                    f"{len(self.colors)} colors for {len(self.positions)} positions")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class QueryBatch:
    points: np.ndarray
    occupied: np.ndarray
    color_bins: np.ndarray

    def __post_init__(self):
        n = len(self.points)
        if len(self.occupied) != n or len(self.color_bins) != n:
            raise ValueError("query arrays have different lengths")
        if self.color_bins.size and (self.color_bins.min() < 0 or self.color_bins.max() > 255):
            raise ValueError("color bins must lie in [0, 255]")


@dataclass(frozen=True)
class NormalizationTransform:
    """``normalized = (p - centroid) / scale``."""

    centroid: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.centroid) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.centroid


def unproject(frame: RgbdFrame, to_world: bool = True):
    """Lift every pixel with finite depth to 3D.

    Pixel (u, v) has its ray through the integer coordinate itself, so the
    camera-frame point is ``((u - cx) d / fx, (v - cy) d / fy, d)``.

    Returns:
        (PointCloud of the valid pixels in row-major order, (H, W) validity mask).
    """
    points, valid = unproject_map(frame, to_world)
    return PointCloud(points[valid], frame.image[valid]), valid


def unproject_map(frame: RgbdFrame, to_world: bool = True):
    """Per-pixel (H, W, 3) point map and validity; invalid pixels hold NaN."""
    k = frame.intrinsics
    h, w = frame.depth.shape
    if (h, w) != (k.height, k.width) or frame.image.shape[:2] != (h, w):
        raise ValueError(
            f"image {frame.image.shape[:2]}, depth {(h, w)} and intrinsics "
            f"{(k.height, k.width)} disagree")
    d = frame.depth.astype(np.float64)
    valid = np.isfinite(d)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d], axis=-1)
    if to_world:
        pts = frame.pose.apply(pts)
    pts[~valid] = np.nan
    return pts, valid


def project(points_cam: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points to (u, v, depth)."""
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[..., 2]
    u = p[..., 0] * intrinsics.fx / z + intrinsics.cx
    v = p[..., 1] * intrinsics.fy / z + intrinsics.cy
    return np.stack([u, v, z], axis=-1)


def build_gt_cloud(frames: Sequence[RgbdFrame]) -> PointCloud:
    """Union (concatenation, duplicates kept) of the world-frame unprojections."""
    if len(frames) == 0:
        raise ValueError("need at least one frame to build a ground-truth cloud")
    clouds = [unproject(f, to_world=True)[0] for f in frames]
    return PointCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.colors for c in clouds]),
    )


def fit_normalization(points: np.ndarray, center: bool = True) -> NormalizationTransform:
    """Isotropic transform giving zero mean and pooled coordinate variance 1.

    With ``center=False`` the centroid is pinned at the origin (the camera in
    scene mode) and only the spread about the mean sets the scale.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) < 2:
        raise ValueError(f"need at least 2 points to normalize, got {len(p)}")
    mean = p.mean(axis=0)
    scale = float(np.sqrt(np.mean((p - mean) ** 2)))
    if scale < 1e-12:
        raise ValueError("degenerate cloud: all points coincide")
    return NormalizationTransform(mean if center else np.zeros(3), scale)


def normalize_cloud(cloud: PointCloud):
    """Return the normalized cloud and the transform that produced it."""
    t = fit_normalization(cloud.positions)
    return PointCloud(t.apply(cloud.positions), cloud.colors), t


def label_queries(queries: np.ndarray, gt: PointCloud, tau: float, backend: str | None = None):
    """Occupancy (nearest GT point within ``tau``, inclusive) and color-bin targets.

    Unoccupied queries get color bins of 0. Ties on distance resolve to the
    lowest GT index.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if len(gt) == 0:
        raise ValueError("ground-truth cloud is empty")
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    dist, idx = radius_grid(gt.positions, tau, backend=backend).nearest_within(q, tau)
    occupied = dist <= tau
    bins = np.zeros((len(q), 3), dtype=np.int64)
    if gt.colors is not None and occupied.any():
        bins[occupied] = color_bin(gt.colors[idx[occupied]])
    return occupied, bins


def label_queries_brute(queries: np.ndarray, gt: PointCloud, tau: float):
    """O(N_q * N) reference for :func:`label_queries`."""
    from mcc.neighbors import brute_force_nearest

    if len(gt) == 0:
        raise ValueError("ground-truth cloud is empty")
    dist, idx = brute_force_nearest(queries, gt.positions)
    occupied = dist <= tau
    bins = np.zeros((len(dist), 3), dtype=np.int64)
    if gt.colors is not None and occupied.any():
        bins[occupied] = color_bin(gt.colors[idx[occupied]])
    return occupied, bins


def grid_shape(lo, hi, granularity: float) -> tuple[int, int, int]:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if not granularity > 0:
        raise ValueError(f"granularity must be positive, got {granularity}")
    if np.any(hi <= lo):
        raise ValueError(f"grid max {hi} must exceed min {lo} on every axis")
    # the epsilon absorbs 6/0.1 landing a hair under 60
    n = np.floor((hi - lo) / granularity + 1e-9).astype(np.int64) + 1
    return tuple(int(x) for x in n)


def make_grid(lo, hi, granularity: float) -> np.ndarray:
    """Inclusive lattice ``lo + i * granularity``, x varying fastest."""
    nx, ny, nz = grid_shape(lo, hi, granularity)
    lo = np.asarray(lo, dtype=np.float64)
    # lo + i*g (never cumulative sums) so coarse and fine lattices share bit-identical points
    xs = lo[0] + np.arange(nx) * granularity
    ys = lo[1] + np.arange(ny) * granularity
    zs = lo[2] + np.arange(nz) * granularity
    z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def axis_rotation(axis: int, degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    if axis == 0:
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 1:
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_rotation(ax: float, ay: float, az: float) -> np.ndarray:
    """Rz @ Ry @ Rx for angles in degrees."""
    return axis_rotation(2, az) @ axis_rotation(1, ay) @ axis_rotation(0, ax)


def random_rotation(rng: np.random.Generator, theta_range=((-180.0, 180.0),) * 3) -> np.ndarray:
    """Compose per-axis rotations with angles drawn uniformly from ``theta_range`` (degrees).

    ``theta_range`` is one (lo, hi) pair per axis (x, y, z) or a single pair for all.
    """
    rng_ = np.asarray(theta_range, dtype=np.float64)
    if rng_.shape == (2,):
        rng_ = np.tile(rng_, (3, 1))
    if rng_.shape != (3, 2) or np.any(rng_[:, 0] > rng_[:, 1]) or np.any(np.abs(rng_) > 180):
        raise ValueError(f"invalid rotation range {theta_range}")
    angles = rng.uniform(rng_[:, 0], rng_[:, 1])
    return euler_rotation(*angles)


def color_bin(c):
    """Quantize [0, 1] color to 256 bins, rounding half up."""
    c = np.asarray(c, dtype=np.float64)
    if np.any(~(c >= 0) | ~(c <= 1)):
        raise ValueError("color values must lie in [0, 1]")
    out = np.floor(c * 255 + 0.5).astype(np.int64)
    return out if out.ndim else int(out)


def bin_color(b):
    b = np.asarray(b)
    return b / 255.0
