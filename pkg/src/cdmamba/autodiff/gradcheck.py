"""Finite-difference verification oracle for every differentiable op."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(f, inputs, eps: float = 1e-5, sample: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given tensors to a scalar Tensor. All inputs are treated
    as differentiable. Relative error uses a max(|analytic|, |numeric|, 1e-8)
    denominator. ``sample`` caps the checked coordinates per tensor (evenly
    spaced, deterministic) for large inputs.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    else:
        inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        n = flat.size
        if sample is not None and n > sample:
            idxs = np.unique(np.linspace(0, n - 1, sample).astype(int))
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
