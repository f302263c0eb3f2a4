"""Binary checkpoint format ``MCCK1``.

    magic      5 bytes  b"MCCK1"
    count      uint32   number of parameter records
    record     uint32 name length, UTF-8 name, uint32 rank,
               rank x uint64 dims, float32 values (little-endian, C order)
    step       uint64
    count      uint32   number of optimizer records, then records as above

Optimizer records are named ``m/<param>`` and ``v/<param>``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from mcc.nn.optim import AdamState

MAGIC = b"MCCK1"


class CheckpointError(ValueError):
    pass


def _write_records(f, tensors: dict) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def records(self, what: str) -> dict:
        (count,) = self.unpack("<I", f"{what} count")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<I", f"{what} name length")
            name = self.take(nlen, f"{what} name").decode("utf-8")
            (rank,) = self.unpack("<I", f"rank of {name}")
            shape = self.unpack(f"<{rank}Q", f"shape of {name}") if rank else ()
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            values = np.frombuffer(self.take(4 * size, f"values of {name}"), dtype="<f4")
            out[name] = torch.from_numpy(values.reshape(shape).astype(np.float32))
        return out


def save_checkpoint(path, params: dict, step: int, opt_state: AdamState | None = None) -> None:
    """Write parameters, the step counter and Adam moments (if any)."""
    opt = {}
    if opt_state is not None:
        for name in params:
            if name in opt_state.m:
                opt[f"m/{name}"] = opt_state.m[name]
                opt[f"v/{name}"] = opt_state.v[name]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        _write_records(f, params)
        f.write(struct.pack("<Q", int(step)))
        _write_records(f, opt)
    tmp.replace(path)


def load_checkpoint(path):
    """Return (params, step, AdamState) with float32 tensors."""
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:5]!r}, expected {MAGIC!r}")
    r = _Reader(data, path)
    r.pos = 5
    params = r.records("parameter")
    (step,) = r.unpack("<Q", "step counter")
    opt = r.records("optimizer")
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    state = AdamState(step,
                      {k[2:]: v for k, v in opt.items() if k.startswith("m/")},
                      {k[2:]: v for k, v in opt.items() if k.startswith("v/")})
    return params, step, state
