import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcc.geometry import PointCloud
from mcc.metrics import EmptyPredictionWarning, accuracy, chamfer, completeness, evaluate, f1
from mcc.neighbors import BACKEND
from mcc.selftest import brute_metrics

BACKENDS = ["numpy"] + (["cython"] if BACKEND == "cython" else [])


def test_worked_example():
    pred = np.array([[0.0, 0, 0]])
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    r = evaluate(pred, gt, 0.1)
    assert r.accuracy == 100.0 and r.completeness == 50.0
    assert r.f1 == 2 * 100 * 50 / 150
    assert round(r.f1, 2) == 66.67
    assert r.chamfer == 0.5 * (0.0 + 0.5)


def test_identical_clouds(rng):
    pts = rng.normal(size=(200, 3))
    r = evaluate(PointCloud(pts), PointCloud(pts), 0.1)
    assert (r.accuracy, r.completeness, r.f1, r.chamfer) == (100.0, 100.0, 100.0, 0.0)


def test_inclusive_radius():
    assert accuracy([[0.5, 0, 0]], [[0.0, 0, 0]], 0.5) == 100.0
    assert completeness([[0.0, 0.5, 0]], [[0.0, 0, 0]], 0.5) == 100.0


def test_empty_prediction_warns():
    with pytest.warns(EmptyPredictionWarning):
        r = evaluate(np.zeros((0, 3)), np.zeros((3, 3)), 0.1)
    assert (r.accuracy, r.completeness, r.f1) == (0.0, 0.0, 0.0)
    assert r.empty_prediction and math.isnan(r.chamfer)
    assert "empty_prediction,1" in r.to_csv()


def test_errors():
    with pytest.raises(ValueError):
        accuracy([[0.0, 0, 0]], np.zeros((0, 3)))
    with pytest.raises(ValueError):
        completeness([[0.0, 0, 0]], [[0.0, 0, 0]], 0.0)
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), [[0.0, 0, 0]])


def test_f1_edge_cases():
    assert f1(0.0, 0.0) == 0.0
    assert f1(100.0, 100.0) == 100.0


def test_csv_format():
    text = evaluate([[0.0, 0, 0]], [[0.0, 0, 0], [1.0, 0, 0]], 0.1).to_csv()
    lines = text.splitlines()
    assert lines[0] == "metric,value"
    assert [l.split(",")[0] for l in lines[1:]] == ["accuracy", "completeness", "f1", "chamfer", "empty_prediction"]
    assert float(lines[2].split(",")[1]) == 50.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_brute_force_100_instances(backend):
    rng = np.random.default_rng(7)
    for _ in range(100):
        pred = rng.uniform(-1, 1, (int(rng.integers(1, 300)), 3))
        gt = rng.uniform(-1, 1, (int(rng.integers(1, 300)), 3))
        rho = float(rng.uniform(0.02, 0.4))
        acc, cmp, cd = brute_metrics(pred, gt, rho)
        assert abs(accuracy(pred, gt, rho, backend) - acc) <= 1e-12
        assert abs(completeness(pred, gt, rho, backend) - cmp) <= 1e-12
        assert abs(chamfer(pred, gt, backend) - cd) <= 1e-12


@given(st.integers(0, 2**31), st.sampled_from([0.1, 0.2, 0.5]))
def test_grid_aligned_ties_match_brute_force(seed, rho):
    # lattice points sit at exactly rho from each other, the hardest case for "<="
    r = np.random.default_rng(seed)
    pred = np.round(r.uniform(-1, 1, (int(r.integers(1, 80)), 3)), 1)
    gt = np.round(r.uniform(-1, 1, (int(r.integers(1, 80)), 3)), 1)
    acc, cmp, cd = brute_metrics(pred, gt, rho)
    assert abs(accuracy(pred, gt, rho) - acc) <= 1e-12
    assert abs(completeness(pred, gt, rho) - cmp) <= 1e-12
    assert abs(chamfer(pred, gt) - cd) <= 1e-12
