"""Procedural RGB-D scenes built from analytic primitives.

Scenes are sets of spheres, oriented boxes and oriented cylinders. Every
primitive has a closed-form ray intersection (used to render depth and
color) and a closed-form signed distance (the exact occupancy oracle).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mcc.geometry import CameraIntrinsics, Pose, RgbdFrame, check_rotation, random_rotation

KINDS = ("sphere", "box", "cylinder")

# directional light (unit vector pointing towards the light) and ambient floor
LIGHT_DIR = np.array([0.36, 0.48, 0.8]) / np.linalg.norm([0.36, 0.48, 0.8])
AMBIENT = 0.35


@dataclass(eq=False)
class Primitive:
    kind: str
    center: np.ndarray
    params: np.ndarray  # sphere (r, 0, 0); box (hx, hy, hz); cylinder (r, half_height, 0)
    albedo: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.params = np.asarray(self.params, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(3, 3)
        n_size = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        if np.any(self.params[:n_size] <= 0):
            raise ValueError(f"{self.kind} size parameters must be positive: {self.params}")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError(f"albedo must lie in [0, 1]: {self.albedo}")
        check_rotation(self.orientation)

    def __eq__(self, other):
        if not isinstance(other, Primitive):
            return NotImplemented
        return self.kind == other.kind and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("center", "params", "albedo", "orientation"))

    def bounding_radius(self) -> float:
        p = self.params
        if self.kind == "sphere":
            return float(p[0])
        if self.kind == "box":
            return float(np.linalg.norm(p))
        return float(math.hypot(p[0], p[1]))

    def local(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) @ self.orientation

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance (negative inside) for (..., 3) points."""
        q = self.local(np.asarray(points, dtype=np.float64))
        p = self.params
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - p[0]
        if self.kind == "box":
            d = np.abs(q) - p
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            return outside + np.minimum(d.max(axis=-1), 0.0)
        d = np.stack([np.linalg.norm(q[..., :2], axis=-1) - p[0], np.abs(q[..., 2]) - p[1]], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return outside + np.minimum(d.max(axis=-1), 0.0)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray):
        """First hit of rays ``origin + t * dirs`` (t > 0).

        Returns (t, world normal); t is inf for misses. ``dirs`` need not be unit.
        """
        o = self.local(origin[None, :])[0]
        d = dirs @ self.orientation
        p = self.params
        n = len(d)
        t = np.full(n, np.inf)
        normal = np.zeros((n, 3))
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "sphere":
                a = np.einsum("ij,ij->i", d, d)
                b = d @ o
                c = o @ o - p[0] ** 2
                disc = b * b - a * c
                hit = disc >= 0
                root = (-b - np.sqrt(np.where(hit, disc, 0.0))) / a
                ok = hit & (root > 0)
                t[ok] = root[ok]
                normal = (o + np.where(ok, root, 0.0)[:, None] * d) / p[0]
            elif self.kind == "box":
                t1 = (-p - o) / d
                t2 = (p - o) / d
                tnear = np.minimum(t1, t2)
                tfar = np.maximum(t1, t2)
                tmin = np.nanmax(tnear, axis=1)
                tmax = np.nanmin(tfar, axis=1)
                ok = (tmax >= tmin) & (tmin > 0)
                t[ok] = tmin[ok]
                axis = np.nanargmax(np.where(np.isnan(tnear), -np.inf, tnear), axis=1)
                sign = -np.sign(d[np.arange(n), axis])
                normal[np.arange(n), axis] = sign
            else:
                r, hh = p[0], p[1]
                # lateral surface
                a = d[:, 0] ** 2 + d[:, 1] ** 2
                b = d[:, 0] * o[0] + d[:, 1] * o[1]
                c = o[0] ** 2 + o[1] ** 2 - r * r
                disc = b * b - a * c
                side = (disc >= 0) & (a > 0)
                ts = (-b - np.sqrt(np.where(side, disc, 0.0))) / np.where(a > 0, a, 1.0)
                zs = o[2] + ts * d[:, 2]
                side &= (ts > 0) & (np.abs(zs) <= hh)
                t[side] = ts[side]
                hit_pts = o + np.where(side, ts, 0.0)[:, None] * d
                normal[side, 0] = hit_pts[side, 0] / r
                normal[side, 1] = hit_pts[side, 1] / r
                # caps
                for z_cap in (-hh, hh):
                    tc = (z_cap - o[2]) / d[:, 2]
                    pc = o + np.where(np.isfinite(tc), tc, 0.0)[:, None] * d
                    cap = np.isfinite(tc) & (tc > 0) & (pc[:, 0] ** 2 + pc[:, 1] ** 2 <= r * r) & (tc < t)
                    t[cap] = tc[cap]
                    normal[cap] = 0.0
                    normal[cap, 2] = np.sign(z_cap)
        return t, normal @ self.orientation.T


@dataclass
class SceneSpec:
    primitives: list
    seed: int
    mode: str = "object"

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise ValueError("a scene needs at least one primitive")
        if self.mode not in ("object", "scene"):
            raise ValueError(f"mode must be 'object' or 'scene', got {self.mode!r}")
        if self.mode == "object":
            for prim in self.primitives:
                if np.linalg.norm(prim.center) + prim.bounding_radius() > 2.0 + 1e-9:
                    raise ValueError("object-mode primitives must fit in a ball of radius 2")


@dataclass
class SceneParams:
    """Ranges for :func:`generate_scene`."""

    min_primitives: int = 1
    max_primitives: int = 3
    size_range: tuple = (0.45, 0.9)
    albedo_range: tuple = (0.15, 0.95)
    kinds: tuple = KINDS
    mode: str = "object"
    gap: float = 0.15

    def validate(self):
        if self.min_primitives < 1 or self.max_primitives < self.min_primitives:
            raise ValueError(
                f"invalid primitive count range [{self.min_primitives}, {self.max_primitives}]")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid size range {self.size_range}")
        if self.mode == "object" and hi * math.sqrt(3) > 2.0:
            raise ValueError("size range too large for the radius-2 object ball")
        a, b = self.albedo_range
        if not 0 <= a <= b <= 1:
            raise ValueError(f"invalid albedo range {self.albedo_range}")
        if not self.kinds or any(k not in KINDS for k in self.kinds):
            raise ValueError(f"invalid kinds {self.kinds}")
        if self.mode not in ("object", "scene"):
            raise ValueError(f"invalid mode {self.mode!r}")


def _random_primitive(rng, params: SceneParams, kind: str) -> Primitive:
    s = rng.uniform(*params.size_range)
    albedo = rng.uniform(params.albedo_range[0], params.albedo_range[1], size=3)
    if kind == "sphere":
        size, rot = np.array([s, 0.0, 0.0]), np.eye(3)
    elif kind == "box":
        size, rot = s * rng.uniform(0.55, 1.0, size=3), random_rotation(rng)
    else:
        size = np.array([s * rng.uniform(0.55, 1.0), s * rng.uniform(0.6, 1.1), 0.0])
        rot = random_rotation(rng)
    return Primitive(kind, np.zeros(3), size, albedo, rot)


def _place(rng, prim: Primitive, placed: list, params: SceneParams) -> bool:
    b = prim.bounding_radius()
    for _ in range(200):
        if params.mode == "object":
            room = 2.0 - b
            v = rng.normal(size=3)
            center = v / np.linalg.norm(v) * room * rng.uniform() ** (1 / 3)
        else:
            ang = rng.uniform(-math.pi, math.pi)
            dist = rng.uniform(2.5 + b, 5.5)
            center = np.array([dist * math.cos(ang), dist * math.sin(ang), rng.uniform(-1.0, 1.0)])
        if all(np.linalg.norm(center - q.center) > b + q.bounding_radius() + params.gap for q in placed):
            prim.center = center
            return True
    return False


def generate_scene(seed: int, params: SceneParams | None = None) -> SceneSpec:
    """Deterministic random scene of non-overlapping primitives."""
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng(seed)
    count = int(rng.integers(params.min_primitives, params.max_primitives + 1))
    placed: list = []
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > 100 * count:
            raise ValueError(f"could not place {count} primitives without overlap")
        kind = params.kinds[int(rng.integers(len(params.kinds)))]
        prim = _random_primitive(rng, params, kind)
        if _place(rng, prim, placed, params):
            placed.append(prim)
    return SceneSpec(placed, seed, params.mode)


def scene_sdf(scene: SceneSpec, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.min(np.stack([prim.sdf(p) for prim in scene.primitives]), axis=0)


def analytic_distance(scene: SceneSpec, points) -> np.ndarray:
    """Exact unsigned distance to the union of primitive surfaces."""
    p = np.asarray(points, dtype=np.float64)
    return np.min(np.stack([np.abs(prim.sdf(p)) for prim in scene.primitives]), axis=0)


def oracle_occupancy(scene: SceneSpec, queries, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return analytic_distance(scene, queries) <= tau


@dataclass
class ViewSpec:
    """Camera centres, look-at targets and shared intrinsics."""

    eyes: np.ndarray
    targets: np.ndarray
    intrinsics: CameraIntrinsics
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.eyes = np.asarray(self.eyes, dtype=np.float64).reshape(-1, 3)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if self.eyes.shape != self.targets.shape:
            raise ValueError("need one target per camera")
        if not (np.all(np.isfinite(self.eyes)) and np.all(np.isfinite(self.targets))):
            raise ValueError("camera positions and targets must be finite")

    def __len__(self) -> int:
        return len(self.eyes)

    def poses(self) -> list:
        return [look_at(e, t, self.up) for e, t in zip(self.eyes, self.targets)]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose; camera x right, y down, z forward."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(z)
    if norm == 0:
        raise ValueError("camera target coincides with its position")
    z = z / norm
    down = -np.asarray(up, dtype=np.float64)
    x = np.cross(down, z)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(np.array([0.0, -1.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def object_views(n_views: int, image_size: int = 64, distance: float = 4.5,
                 fov_deg: float = 56.0) -> ViewSpec:
    """Cameras spread evenly on a sphere (Fibonacci lattice), all looking at the origin."""
    i = np.arange(n_views) + 0.5
    polar = np.arccos(1 - 2 * i / n_views)
    azim = math.pi * (1 + 5**0.5) * i
    eyes = distance * np.stack(
        [np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)], axis=1)
    return ViewSpec(eyes, np.zeros_like(eyes), CameraIntrinsics.from_fov(image_size, image_size, fov_deg))


def scene_views(n_views: int, image_size: int = 64, fov_deg: float = 70.0, seed: int = 0) -> ViewSpec:
    """Cameras near the origin looking outward at evenly spaced headings."""
    rng = np.random.default_rng(seed)
    yaw = np.linspace(-math.pi, math.pi, n_views, endpoint=False)
    eyes = rng.uniform(-0.3, 0.3, size=(n_views, 3))
    pitch = rng.uniform(-0.2, 0.2, size=n_views)
    dirs = np.stack([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)], axis=1)
    return ViewSpec(eyes, eyes + dirs, CameraIntrinsics.from_fov(image_size, image_size, fov_deg))


def shade(albedo: np.ndarray, normals: np.ndarray) -> np.ndarray:
    lambert = np.clip(normals @ LIGHT_DIR, 0.0, 1.0)
    return albedo * (AMBIENT + (1 - AMBIENT) * lambert)[..., None]


def render_view(scene: SceneSpec, pose: Pose, intrinsics: CameraIntrinsics):
    """Noise-free z-depth (NaN on miss) and shaded color for one camera."""
    for prim in scene.primitives:
        if prim.sdf(pose.translation[None, :])[0] <= 0:
            raise ValueError("camera is inside a primitive")
    k = intrinsics
    v, u = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    # unit z-component in camera frame: the ray parameter equals z-depth
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d_world = d_cam @ pose.rotation.T
    best = np.full(len(d_world), np.inf)
    color = np.zeros((len(d_world), 3))
    for prim in scene.primitives:
        t, normal = prim.intersect(pose.translation, d_world)
        closer = t < best
        best[closer] = t[closer]
        color[closer] = shade(prim.albedo, normal[closer])
    depth = np.where(np.isfinite(best), best, np.nan).reshape(k.height, k.width)
    return depth, np.clip(color, 0.0, 1.0).reshape(k.height, k.width, 3)


def render_views(scene: SceneSpec, views: ViewSpec, noise: float = 0.0,
                 unknown_frac: float = 0.0, seed: int | None = None) -> list:
    """Ray-cast every view; optional Gaussian depth noise and random unknown-depth pixels."""
    if not 0 <= unknown_frac < 1:
        raise ValueError(f"unknown_frac must lie in [0, 1), got {unknown_frac}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    rng = np.random.default_rng(scene.seed if seed is None else seed)
    frames = []
    for pose in views.poses():
        depth, image = render_view(scene, pose, views.intrinsics)
        if noise > 0:
            depth = np.maximum(depth + rng.normal(0.0, noise, size=depth.shape), 1e-3)
        if unknown_frac > 0:
            depth[rng.random(depth.shape) < unknown_frac] = np.nan
        frames.append(RgbdFrame(image, depth, views.intrinsics, pose))
    return frames
