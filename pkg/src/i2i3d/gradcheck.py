"""Central-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, precision


def numeric_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, step: float) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(*[Tensor(a) for a in base]).item()
        flat[i] = orig - step
        down = fn(*[Tensor(a) for a in base]).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def analytic_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    grads = tape.backward(loss, tensors)
    return [grads[t] for t in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients.

    ``fn`` maps one Tensor per entry of ``arrays`` to a scalar Tensor. All
    evaluation happens in float64.
    """
    with precision(np.float64):
        analytic = analytic_gradient(fn, arrays)
        worst = 0.0
        for i, g in enumerate(analytic):
            worst = max(worst, relative_error(g, numeric_gradient(fn, arrays, i, step)))
    return worst
