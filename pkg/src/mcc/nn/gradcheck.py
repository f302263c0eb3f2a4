"""Reverse-mode gradients checked against fourth-order central finite differences."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple  # (input index, flat element index)

    def __float__(self) -> float:
        return self.max_rel_error


def _scalarize(out: torch.Tensor, weights: torch.Tensor | None) -> torch.Tensor:
    if out.dim() == 0:
        return out
    return (out * weights).sum()


def _derivative(at, h: float, refine: int) -> float:
    """Five-point central difference with step refinement.

    ``(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h`` has O(h^4) truncation
    error, so a fairly large step keeps roundoff (~eps |f| / h) small even for
    gradients near 1e-8. Where f bends sharply on the scale of h, the two-point
    rules at h and 2h disagree; the step is then cut tenfold, at most ``refine``
    times. The analytic gradient plays no part in choosing h.
    """
    while True:
        fp, fm, fp2, fm2 = at(h), at(-h), at(2 * h), at(-2 * h)
        d1 = (fp - fm) / (2 * h)
        d2 = (fp2 - fm2) / (4 * h)
        d5 = (4 * d1 - d2) / 3
        if refine == 0 or abs(d1 - d2) <= 1e-3 * max(abs(d5), 1e-8):
            return d5
        h, refine = h / 10, refine - 1


def grad_check(fn, inputs, h: float = 1e-3, max_elements: int | None = None, seed: int = 0,
               refine: int = 2) -> GradCheckResult:
    """Compare autograd against a five-point central difference element by element.

    ``fn(*inputs)`` may return any tensor; non-scalar outputs are contracted
    with fixed random weights. ``inputs`` must be float64 leaf tensors.
    ``max_elements`` caps the elements checked per input (random subset,
    seeded). Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError("grad_check needs float64 inputs")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe = fn(*inputs)
    weights = None if probe.dim() == 0 else torch.randn(probe.shape, generator=gen, dtype=torch.float64)

    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    _scalarize(fn(*leaves), weights).backward()
    analytic = [(leaf.grad if leaf.grad is not None else torch.zeros_like(leaf)) for leaf in leaves]

    worst_err, worst_at, checked = 0.0, (-1, -1), 0
    with torch.no_grad():
        for i, t in enumerate(inputs):
            n = t.numel()
            if max_elements is not None and n > max_elements:
                picks = torch.randperm(n, generator=gen)[:max_elements].tolist()
            else:
                picks = range(n)
            base = t.detach().clone()
            for j in picks:
                args = [x.detach() for x in inputs]
                orig = float(base.view(-1)[j])

                def at(d):
                    flat = base.clone().view(-1)
                    flat[j] = orig + d
                    args[i] = flat.view_as(base)
                    return float(_scalarize(fn(*args), weights))

                num = _derivative(at, h, refine)
                ana = float(analytic[i].reshape(-1)[j])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                checked += 1
                if err > worst_err:
                    worst_err, worst_at = err, (i, j)
    return GradCheckResult(worst_err, checked, worst_at)
