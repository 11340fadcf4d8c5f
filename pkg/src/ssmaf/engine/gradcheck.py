"""Central finite-difference checking of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, TensorND


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps gradients that are zero up to round-off from dividing
    by zero; below it the comparison is effectively absolute.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def analytic_gradients(fn: Callable[..., TensorND], inputs: Sequence[TensorND]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out, params=inputs)
    return [t.grad.copy() for t in inputs]


def numeric_gradient(fn: Callable[..., TensorND], inputs: Sequence[TensorND], which: int,
                     h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. ``inputs[which]``.

    With ``index`` given only that flat element is perturbed and a scalar
    is returned.
    """
    x = inputs[which].data
    flat = x.reshape(-1)

    def at(i):
        old = flat[i]
        flat[i] = old + h
        fp = fn(*inputs).item()
        flat[i] = old - h
        fm = fn(*inputs).item()
        flat[i] = old
        return (fp - fm) / (2 * h)

    if index is not None:
        return np.float64(at(index))
    g = np.empty_like(flat)
    for i in range(flat.size):
        g[i] = at(i)
    return g.reshape(x.shape)


def check_gradients(fn: Callable[..., TensorND], inputs: Sequence[TensorND], h: float = 1e-5,
                    floor: float = 1e-6) -> float:
    """Worst elementwise relative error over all inputs of a scalar function."""
    analytic = analytic_gradients(fn, inputs)
    worst = 0.0
    for k, ga in enumerate(analytic):
        gn = numeric_gradient(fn, inputs, k, h=h)
        worst = max(worst, float(relative_error(ga, gn, floor).max()))
    return worst
