"""Adam with bias correction and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from mcc.nn.functional import NonFiniteError


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(0, {k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              check_finite: bool | None = None) -> AdamState:
    """Update ``params`` in place and return ``state`` advanced by one step.

    Parameters whose gradient is None are treated as having zero gradient.
    ``check_finite`` defaults to on for float64 (test mode) parameters.
    """
    if not state.m:
        state.m = {k: torch.zeros_like(p) for k, p in params.items()}
        state.v = {k: torch.zeros_like(p) for k, p in params.items()}
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        finite_check = check_finite if check_finite is not None else p.dtype == torch.float64
        if finite_check and not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        m, v = state.m[name], state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / c2).sqrt_().add_(eps)
        p.addcdiv_(m / c1, denom, value=-lr)
    return state


def cosine_lr(step: int, total: int, warmup_frac: float, base: float) -> float:
    """Linear warmup from 0 to ``base`` then half-cosine decay to 0 at ``total``."""
    if not 0 <= warmup_frac < 1:
        raise ValueError(f"warmup_frac must lie in [0, 1), got {warmup_frac}")
    if total <= 0:
        raise ValueError(f"total steps must be positive, got {total}")
    step = min(max(step, 0), total)
    warm = warmup_frac * total
    if step < warm:
        return base * step / warm
    span = total - warm
    progress = (step - warm) / span if span > 0 else 1.0
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))
