"""Differentiable building blocks with explicit shape contracts.

All ops take and return torch tensors and rely on autograd for the reverse
pass. Float64 inputs switch on test mode: every result is checked for
NaN/Inf and a :class:`NonFiniteError` is raised at the first offender.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    pass


def _checked(name: str, out: torch.Tensor) -> torch.Tensor:
    if out.dtype == torch.float64 and not torch.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    return out


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as [in, out]."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias {tuple(bias.shape)} incompatible with weight {tuple(weight.shape)}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return _checked("linear", out)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(
            f"layer_norm: input {tuple(x.shape)} vs gain {tuple(gain.shape)} / bias {tuple(bias.shape)}")
    return _checked("layer_norm", F.layer_norm(x, x.shape[-1:], gain, bias, eps))


def gelu(x: torch.Tensor) -> torch.Tensor:
    return _checked("gelu", F.gelu(x))


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return _checked("softmax", torch.softmax(x, dim=axis))


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * dh)


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     mask: torch.Tensor | None, heads: int) -> torch.Tensor:
    """Multi-head scaled dot-product attention.

    q: [..., n, d]; k, v: [..., m, d]; mask: [n, m] booleans (True = may
    attend) or None for full attention. Masked logits are set to -inf, so
    their weights and the gradients flowing through them are exactly zero.
    """
    n, d = q.shape[-2:]
    m = k.shape[-2]
    if k.shape[-1] != d or v.shape[-2:] != (m, d):
        raise ValueError(
            f"masked_attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)} disagree")
    if d % heads:
        raise ValueError(f"masked_attention: width {d} not divisible by {heads} heads")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    logits = (qh @ kh.transpose(-1, -2)) / math.sqrt(d // heads)
    if mask is not None:
        if mask.shape != (n, m):
            raise ValueError(f"masked_attention: mask {tuple(mask.shape)} vs logits ({n}, {m})")
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("masked_attention: a mask row allows no keys")
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return _checked("masked_attention", _merge_heads(weights @ vh))


def context_attention(q: torch.Tensor, k_ctx: torch.Tensor, v_ctx: torch.Tensor, heads: int,
                      k_self: torch.Tensor | None = None, v_self: torch.Tensor | None = None) -> torch.Tensor:
    """Each query attends to a shared context and, optionally, to its own key.

    Equivalent to :func:`masked_attention` over ``[context, queries]`` with a
    mask that allows every context key plus the query's own key. Here the
    self key always sits right after the context, so a query's arithmetic
    never depends on how many queries share the batch or where it sits.

    q: [B, n, d]; k_ctx, v_ctx: [B, c, d]; k_self, v_self: [B, n, d] or None.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"context_attention: width {d} not divisible by {heads} heads")
    if k_ctx.shape[-1] != d or v_ctx.shape != k_ctx.shape:
        raise ValueError(
            f"context_attention: q {tuple(q.shape)}, k {tuple(k_ctx.shape)}, v {tuple(v_ctx.shape)} disagree")
    scale = math.sqrt(d // heads)
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k_ctx, v_ctx))
    logits = (qh @ kh.transpose(-1, -2)) / scale
    if k_self is None:
        return _checked("context_attention", _merge_heads(torch.softmax(logits, dim=-1) @ vh))
    ks, vs = _split_heads(k_self, heads), _split_heads(v_self, heads)
    self_logit = (qh * ks).sum(dim=-1, keepdim=True) / scale
    weights = torch.softmax(torch.cat([logits, self_logit], dim=-1), dim=-1)
    out = weights[..., :-1] @ vh + weights[..., -1:] * vs
    return _checked("context_attention", _merge_heads(out))


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy, stable for large |logit| (softplus form)."""
    if logits.shape != targets.shape:
        raise ValueError(f"bce_with_logits: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    t = targets.to(logits.dtype)
    # max(x,0) - x*t + log(1 + exp(-|x|))
    loss = torch.clamp(logits, min=0) - logits * t + torch.log1p(torch.exp(-logits.abs()))
    return _checked("bce_with_logits", loss.mean())


def softmax_cross_entropy(logits: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of ``logits[..., k]`` against integer ``classes[...]``."""
    k = logits.shape[-1]
    if classes.shape != logits.shape[:-1]:
        raise ValueError(
            f"softmax_cross_entropy: logits {tuple(logits.shape)} vs classes {tuple(classes.shape)}")
    if classes.numel() and (int(classes.min()) < 0 or int(classes.max()) >= k):
        raise ValueError(f"softmax_cross_entropy: class index outside [0, {k})")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, classes.long().unsqueeze(-1)).squeeze(-1)
    return _checked("softmax_cross_entropy", -picked.mean())
