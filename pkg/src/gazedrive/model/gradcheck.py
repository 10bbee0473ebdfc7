"""Reverse-mode gradients versus central finite differences."""

from __future__ import annotations

import numpy as np
import torch


def grad_check(model: torch.nn.Module, loss_fn, sample, n_params: int = 64, step: float = 1e-4, seed: int = 0, atol: float = 1e-9) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn(model, sample)`` must return a scalar float64 tensor. Entries are
    drawn at random with every parameter tensor represented at least once.
    Pairs where both gradients are below ``atol`` count as agreeing.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, sample)
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    loss.backward()

    rng = np.random.default_rng(seed)
    picks = [(k, int(rng.integers(p.numel()))) for k, (_, p) in enumerate(named)]
    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
    extra = max(0, n_params - len(picks))
    for k in rng.choice(len(named), size=extra, p=sizes / sizes.sum()):
        picks.append((int(k), int(rng.integers(named[k][1].numel()))))

    worst = 0.0
    with torch.no_grad():
        for k, j in picks:
            p = named[k][1]
            flat = p.view(-1)
            analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[j])
            orig = float(flat[j])
            flat[j] = orig + step
            up = float(loss_fn(model, sample))
            flat[j] = orig - step
            down = float(loss_fn(model, sample))
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            scale = max(abs(analytic), abs(numeric))
            if scale < atol:
                continue
            worst = max(worst, abs(analytic - numeric) / scale)
    model.zero_grad(set_to_none=True)
    return worst
