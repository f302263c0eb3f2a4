"""Scene bundle directories: per-frame PPM/PFM/camera files plus ``scene.txt``.

Layout::

    frame_0000.ppm   binary P6, 8-bit RGB
    frame_0000.pfm   grayscale Pf, little-endian float32, NaN = unknown depth
    frame_0000.cam   "fx fy cx cy" then the 3x4 world-from-camera matrix
    scene.txt        one primitive per line
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from mcc.geometry import CameraIntrinsics, Pose, RgbdFrame, color_bin
from mcc.synthdata import Primitive, SceneSpec

_FRAME_RE = re.compile(r"^frame_(\d{4,})\.(ppm|pfm|cam)$")


class BundleError(ValueError):
    """Malformed or incomplete bundle; the message names the file and field."""


def _num(x: float) -> str:
    return repr(float(x))


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    data = color_bin(np.clip(image, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _header_tokens(data: bytes, count: int, path) -> tuple[list, int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise BundleError(f"{path}: truncated header")
        tokens.append(data[start:pos].decode("ascii", errors="replace"))
    # exactly one whitespace byte separates the header from the payload
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = _header_tokens(data, 4, path)
    if tokens[0] != "P6":
        raise BundleError(f"{path}: bad magic {tokens[0]!r}, expected 'P6'")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise BundleError(f"{path}: non-integer width/height/maxval in header") from exc
    if maxval != 255:
        raise BundleError(f"{path}: maxval {maxval} unsupported (need 255)")
    payload = data[pos:]
    if len(payload) != w * h * 3:
        raise BundleError(f"{path}: pixel data has {len(payload)} bytes, expected {w * h * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as f:
        # negative scale marks little-endian; scanlines run bottom to top
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(depth).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"Pf"):
        raise BundleError(f"{path}: bad magic {data[:2]!r}, expected b'Pf'")
    tokens, pos = _header_tokens(data, 4, path)
    if tokens[0] != "Pf":
        raise BundleError(f"{path}: bad magic {tokens[0]!r}, expected 'Pf'")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise BundleError(f"{path}: malformed width/height/scale in header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    payload = data[pos:]
    if len(payload) != w * h * 4:
        raise BundleError(f"{path}: depth data has {len(payload)} bytes, expected {w * h * 4}")
    return np.flipud(np.frombuffer(payload, dtype=dtype).reshape(h, w)).astype(np.float32)


def write_cam(path, intrinsics: CameraIntrinsics, pose: Pose) -> None:
    k = intrinsics
    lines = [" ".join(_num(x) for x in (k.fx, k.fy, k.cx, k.cy))]
    lines += [" ".join(_num(x) for x in row) for row in pose.matrix()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cam(path, width: int, height: int):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) != 4:
        raise BundleError(f"{path}: expected 4 lines (intrinsics + 3x4 pose), found {len(lines)}")
    try:
        fx, fy, cx, cy = (float(x) for x in lines[0].split())
    except ValueError as exc:
        raise BundleError(f"{path}: line 1 must hold 'fx fy cx cy'") from exc
    try:
        mat = np.array([[float(x) for x in ln.split()] for ln in lines[1:]])
    except ValueError as exc:
        raise BundleError(f"{path}: pose rows must be numeric") from exc
    if mat.shape != (3, 4):
        raise BundleError(f"{path}: pose must be 3x4, got {mat.shape}")
    try:
        return CameraIntrinsics(fx, fy, cx, cy, width, height), Pose(mat[:, :3], mat[:, 3])
    except ValueError as exc:
        raise BundleError(f"{path}: {exc}") from exc


def write_scene(path, scene: SceneSpec) -> None:
    lines = [f"# seed {scene.seed} mode {scene.mode}"]
    for p in scene.primitives:
        nums = [*p.center, *p.params, *p.albedo, *p.orientation.ravel()]
        lines.append(p.kind + " " + " ".join(_num(x) for x in nums))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene(path) -> SceneSpec:
    seed, mode, prims = 0, "object", []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            meta = dict(zip(parts[::2], parts[1::2]))
            seed = int(meta.get("seed", seed))
            mode = meta.get("mode", mode)
            continue
        parts = line.split()
        if len(parts) != 19:
            raise BundleError(f"{path}:{lineno}: primitive needs kind + 18 numbers, got {len(parts) - 1}")
        try:
            v = np.array([float(x) for x in parts[1:]])
            prims.append(Primitive(parts[0], v[0:3], v[3:6], v[6:9], v[9:18].reshape(3, 3)))
        except ValueError as exc:
            raise BundleError(f"{path}:{lineno}: {exc}") from exc
    try:
        return SceneSpec(prims, seed, mode)
    except ValueError as exc:
        raise BundleError(f"{path}: {exc}") from exc


def write_bundle(directory, frames, scene: SceneSpec) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        write_ppm(d / f"frame_{i:04d}.ppm", fr.image)
        write_pfm(d / f"frame_{i:04d}.pfm", fr.depth)
        write_cam(d / f"frame_{i:04d}.cam", fr.intrinsics, fr.pose)
    write_scene(d / "scene.txt", scene)
    return d


def frame_indices(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"bundle directory {d} does not exist")
    found: dict = {}
    for entry in d.iterdir():
        m = _FRAME_RE.match(entry.name)
        if m:
            found.setdefault(int(m.group(1)), set()).add(m.group(2))
    for idx in sorted(found):
        missing = {"ppm", "pfm", "cam"} - found[idx]
        if missing:
            names = ", ".join(f"frame_{idx:04d}.{ext}" for ext in sorted(missing))
            raise BundleError(f"{d}: frame {idx} is missing {names}")
    return sorted(found)


def read_frame(directory, idx: int) -> RgbdFrame:
    d = Path(directory)
    stem = d / f"frame_{idx:04d}"
    for ext in ("ppm", "pfm", "cam"):
        if not stem.with_suffix("." + ext).exists():
            raise BundleError(f"{d}: frame {idx} is missing {stem.name}.{ext}")
    image = read_ppm(stem.with_suffix(".ppm"))
    depth = read_pfm(stem.with_suffix(".pfm"))
    h, w = image.shape[:2]
    if depth.shape != (h, w):
        raise BundleError(f"{stem}.pfm: depth is {depth.shape}, image is {(h, w)}")
    intr, pose = read_cam(stem.with_suffix(".cam"), w, h)
    try:
        return RgbdFrame(image, depth, intr, pose)
    except ValueError as exc:
        raise BundleError(f"{stem}: {exc}") from exc


def read_bundle(directory):
    """Return (frames, scene) from a bundle directory."""
    d = Path(directory)
    indices = frame_indices(d)
    if not indices:
        raise BundleError(f"{d}: no frames found")
    if indices != list(range(len(indices))):
        gap = next(i for i, j in enumerate(indices) if i != j)
        raise BundleError(f"{d}: frame {gap} is missing (frames must be numbered from 0)")
    if not (d / "scene.txt").exists():
        raise BundleError(f"{d}: missing scene.txt")
    return [read_frame(d, i) for i in indices], read_scene(d / "scene.txt")
