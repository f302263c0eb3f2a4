"""Fast property checks run by ``mcc selftest``.

Each check returns (ok, detail). The suite covers gradients, the decoder
mask and query independence, and metric / neighbour search oracles.
"""
from __future__ import annotations

import time

import numpy as np
import torch

from mcc import nn as ops
from mcc.geometry import PointCloud, label_queries, label_queries_brute
from mcc.metrics import accuracy, chamfer, completeness
from mcc.model import MCC, ModelConfig, build_decoder_mask
from mcc.neighbors import BACKEND, brute_force_nearest, nearest
from mcc.train import compute_loss


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def primitive_grad_cases(seed: int = 0):
    """(name, fn, inputs) for every differentiable primitive op."""
    g = torch.Generator().manual_seed(seed)
    mask = torch.rand(3, 5, generator=g) > 0.5
    mask[:, 0] = True
    occ = torch.rand(6, generator=g) > 0.5
    cls = torch.randint(0, 7, (4,), generator=g)
    return [
        ("linear", lambda x, w, b: ops.linear(x, w, b), [_rand(g, 4, 4), _rand(g, 4, 4), _rand(g, 4)]),
        ("layer_norm", lambda x, a, b: ops.layer_norm(x, a, b), [_rand(g, 3, 6), _rand(g, 6), _rand(g, 6)]),
        ("gelu", ops.gelu, [_rand(g, 5, 4)]),
        ("softmax", lambda x: ops.softmax(x, -1), [_rand(g, 3, 5)]),
        ("masked_attention", lambda q, k, v: ops.masked_attention(q, k, v, mask, 2),
         [_rand(g, 3, 4), _rand(g, 5, 4), _rand(g, 5, 4)]),
        ("context_attention", lambda q, kc, vc, ks, vs: ops.context_attention(q, kc, vc, 2, ks, vs),
         [_rand(g, 1, 3, 4), _rand(g, 1, 5, 4), _rand(g, 1, 5, 4), _rand(g, 1, 3, 4), _rand(g, 1, 3, 4)]),
        ("bce_with_logits", lambda x: ops.bce_with_logits(x, occ), [_rand(g, 6)]),
        ("softmax_cross_entropy", lambda x: ops.softmax_cross_entropy(x, cls), [_rand(g, 4, 7)]),
    ]


def model_grad_case(cfg: ModelConfig | None = None, seed: int = 0, n_queries: int = 16):
    """Loss of a float64 model as a function of all its parameters."""
    from torch.func import functional_call

    cfg = cfg or ModelConfig.desk()
    model = MCC(cfg, seed=seed).double()
    g = torch.Generator().manual_seed(seed)
    s = cfg.image_size
    image = torch.rand(1, s, s, 3, generator=g, dtype=torch.float64)
    points = _rand(g, 1, s, s, 3)
    valid = torch.rand(1, s, s, generator=g) > 0.3
    queries = torch.rand(1, n_queries, 3, generator=g, dtype=torch.float64) * 6 - 3
    occupied = torch.rand(1, n_queries, generator=g) > 0.5
    bins = torch.randint(0, 256, (1, n_queries, 3), generator=g)
    names = [n for n, _ in model.named_parameters()]

    def loss(*params):
        out = functional_call(model, dict(zip(names, params)), (image, points, valid, queries))
        return compute_loss(out, occupied, bins, 0.1)[0]

    return loss, [p.detach().clone() for p in model.parameters()], names


def mask_oracle(n_enc: int, n_q: int) -> np.ndarray:
    n = 1 + n_enc + n_q
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            out[i, j] = j <= n_enc or i == j
    return out


def independence_trial(model: MCC, seed: int) -> bool:
    """Perturb, reorder and re-chunk queries; untouched queries must not change at all."""
    cfg = model.cfg
    g = torch.Generator().manual_seed(seed)
    s = cfg.image_size
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 3 * cfg.query_block))
    with torch.no_grad():
        enc = model.encode(torch.rand(1, s, s, 3, generator=g), torch.randn(1, s, s, 3, generator=g),
                           torch.rand(1, s, s, generator=g) > 0.3)
        q = torch.rand(1, n, 3, generator=g) * 6 - 3
        base = model.decode(enc, q)
        j = int(rng.integers(n))
        q2 = q.clone()
        q2[0, j] += torch.randn(3, generator=g)
        pert = model.decode(enc, q2)
        keep = torch.ones(n, dtype=torch.bool)
        keep[j] = False
        perm = torch.from_numpy(rng.permutation(n))
        shuf = model.decode(enc, q[:, perm])
        cut = int(rng.integers(1, n))
        parts = [model.decode(enc, q[:, :cut]), model.decode(enc, q[:, cut:])]
    ok = torch.equal(base.occupancy_logits[:, keep], pert.occupancy_logits[:, keep])
    ok &= torch.equal(base.color_logits[:, keep], pert.color_logits[:, keep])
    ok &= torch.equal(base.occupancy_logits[:, perm], shuf.occupancy_logits)
    ok &= torch.equal(base.color_logits[:, perm], shuf.color_logits)
    ok &= torch.equal(base.occupancy_logits, torch.cat([p.occupancy_logits for p in parts], dim=1))
    ok &= torch.equal(base.color_logits, torch.cat([p.color_logits for p in parts], dim=1))
    return bool(ok)


def brute_metrics(pred: np.ndarray, gt: np.ndarray, rho: float):
    d_pg = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    acc = 100.0 * np.mean(d_pg.min(axis=1) <= rho)
    cmp = 100.0 * np.mean(d_pg.min(axis=0) <= rho)
    cd = 0.5 * (d_pg.min(axis=1).mean() + d_pg.min(axis=0).mean())
    return acc, cmp, cd


def _check_primitive_grads():
    worst = 0.0
    for name, fn, inputs in primitive_grad_cases():
        err = ops.grad_check(fn, inputs).max_rel_error
        if err > 1e-5:
            return False, f"{name}: relative error {err:.2e}"
        worst = max(worst, err)
    return True, f"max relative error {worst:.2e}"


def _check_model_grad():
    fn, params, names = model_grad_case(ModelConfig.desk(image_size=32))
    r = ops.grad_check(fn, params, max_elements=1)
    return r.max_rel_error <= 1e-4, f"max relative error {r.max_rel_error:.2e} over {r.checked} elements"


def _check_mask():
    for n_enc in range(1, 9):
        for n_q in range(1, 9):
            if not np.array_equal(build_decoder_mask(n_enc, n_q), mask_oracle(n_enc, n_q)):
                return False, f"mismatch at n_enc={n_enc}, n_q={n_q}"
    return True, "64 shapes"


def _check_independence():
    for mode in (dict(), dict(conditioning="global"), dict(decoder_mode="cross_attn"), dict(use_rgb=False)):
        model = MCC(ModelConfig.desk(image_size=32, query_block=16, **mode), seed=1)
        for t in range(5):
            if not independence_trial(model, t):
                return False, f"mode {mode or 'default'} trial {t}"
    return True, "4 modes x 5 trials"


def _check_dense_reference():
    model = MCC(ModelConfig.desk(image_size=32, query_block=8), seed=2).double()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        enc = model.encode(torch.rand(1, 32, 32, 3, generator=g, dtype=torch.float64),
                           _rand(g, 1, 32, 32, 3), torch.rand(1, 32, 32, generator=g) > 0.3)
        q = _rand(g, 1, 20, 3)
        a, b = model.decode(enc, q), model.decode_dense(enc, q)
    err = float((a.occupancy_logits - b.occupancy_logits).abs().max())
    err = max(err, float((a.color_logits - b.color_logits).abs().max()))
    return err <= 1e-10, f"max difference {err:.2e}"


def _check_metrics():
    rng = np.random.default_rng(0)
    for t in range(10):
        pred = rng.uniform(-1, 1, (int(rng.integers(1, 200)), 3))
        gt = rng.uniform(-1, 1, (int(rng.integers(1, 200)), 3))
        rho = float(rng.uniform(0.05, 0.3))
        acc, cmp, cd = brute_metrics(pred, gt, rho)
        got = (accuracy(pred, gt, rho), completeness(pred, gt, rho), chamfer(pred, gt))
        if max(abs(got[0] - acc), abs(got[1] - cmp), abs(got[2] - cd)) > 1e-12:
            return False, f"instance {t}: {got} vs {(acc, cmp, cd)}"
    return True, "10 instances"


def _check_neighbors():
    rng = np.random.default_rng(1)
    backends = ["numpy"] + (["cython"] if BACKEND == "cython" else [])
    for t in range(10):
        pts = np.round(rng.uniform(-1, 1, (300, 3)), 1)
        q = np.round(rng.uniform(-1.2, 1.2, (200, 3)), 1)
        d_ref, i_ref = brute_force_nearest(q, pts)
        occ_ref = label_queries_brute(q, PointCloud(pts, rng.uniform(0, 1, (300, 3))), 0.1)[0]
        for b in backends:
            d, i = nearest(q, pts, backend=b)
            if not (np.array_equal(d, d_ref) and np.array_equal(i, i_ref)):
                return False, f"{b} nearest differs on instance {t}"
            if not np.array_equal(label_queries(q, PointCloud(pts), 0.1, backend=b)[0], occ_ref):
                return False, f"{b} labels differ on instance {t}"
    return True, f"backends {', '.join(backends)}"


CHECKS = [
    ("primitive gradients", _check_primitive_grads),
    ("model gradient", _check_model_grad),
    ("decoder mask table", _check_mask),
    ("query independence", _check_independence),
    ("dense reference decoder", _check_dense_reference),
    ("metrics vs brute force", _check_metrics),
    ("neighbour search vs brute force", _check_neighbors),
]


def run_selftest(verbose: bool = True) -> list:
    """Run every check; return the names of the failed ones."""
    failed = []
    for name, check in CHECKS:
        t0 = time.time()
        try:
            ok, detail = check()
        except Exception as e:  # a crash is a failure, not an abort
            ok, detail = False, f"{type(e).__name__}: {e}"
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.time() - t0:.1f}s)", flush=True)
        if not ok:
            failed.append(name)
    return failed
