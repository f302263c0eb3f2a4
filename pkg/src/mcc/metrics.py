"""Accuracy, completeness, F1 and Chamfer distance between point clouds."""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass

import numpy as np

from mcc.geometry import PointCloud
from mcc.neighbors import nearest, radius_grid


class EmptyPredictionWarning(UserWarning):
    pass


def _positions(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.positions
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def _within(src: np.ndarray, dst: np.ndarray, rho: float, backend) -> np.ndarray:
    dist, _ = radius_grid(dst, rho, backend=backend).nearest_within(src, rho)
    return dist <= rho


def accuracy(pred, gt, rho: float = 0.1, backend: str | None = None) -> float:
    """Percentage of predicted points within ``rho`` of some GT point."""
    p, g = _positions(pred), _positions(gt)
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if len(g) == 0:
        raise ValueError("ground-truth cloud is empty")
    if len(p) == 0:
        warnings.warn("empty prediction: accuracy is 0", EmptyPredictionWarning, stacklevel=2)
        return 0.0
    return 100.0 * float(np.count_nonzero(_within(p, g, rho, backend))) / len(p)


def completeness(pred, gt, rho: float = 0.1, backend: str | None = None) -> float:
    """Percentage of GT points within ``rho`` of some predicted point."""
    p, g = _positions(pred), _positions(gt)
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if len(g) == 0:
        raise ValueError("ground-truth cloud is empty")
    if len(p) == 0:
        warnings.warn("empty prediction: completeness is 0", EmptyPredictionWarning, stacklevel=2)
        return 0.0
    return 100.0 * float(np.count_nonzero(_within(g, p, rho, backend))) / len(g)


def f1(acc: float, cmp: float) -> float:
    if acc + cmp == 0:
        return 0.0
    return 2.0 * acc * cmp / (acc + cmp)


def chamfer(a, b, backend: str | None = None) -> float:
    """0.5 * (mean NN distance a->b + mean NN distance b->a), plain L2 distances."""
    pa, pb = _positions(a), _positions(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    d_ab, _ = nearest(pa, pb, backend=backend)
    d_ba, _ = nearest(pb, pa, backend=backend)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


@dataclass
class MetricReport:
    accuracy: float
    completeness: float
    f1: float
    chamfer: float  # nan when the prediction is empty
    empty_prediction: bool

    def rows(self):
        return [("accuracy", self.accuracy), ("completeness", self.completeness), ("f1", self.f1),
                ("chamfer", self.chamfer), ("empty_prediction", int(self.empty_prediction))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric,value\n")
        for k, v in self.rows():
            buf.write(f"{k},{v!r}\n" if isinstance(v, float) else f"{k},{v}\n")
        return buf.getvalue()


def evaluate(pred, gt, rho: float = 0.1, backend: str | None = None) -> MetricReport:
    p = _positions(pred)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyPredictionWarning)
        acc = accuracy(pred, gt, rho, backend)
        cmp = completeness(pred, gt, rho, backend)
    empty = len(p) == 0
    if empty:
        warnings.warn("empty prediction: all metrics are 0", EmptyPredictionWarning, stacklevel=2)
    cd = float("nan") if empty else chamfer(pred, gt, backend)
    return MetricReport(acc, cmp, f1(acc, cmp), cd, empty)
