"""Matrix primitives needed by the region mutual information loss."""

from __future__ import annotations

import numpy as np

from .tensor import TensorND, as_tensor, make_output


class NotSPDError(np.linalg.LinAlgError):
    """Cholesky hit a non-positive pivot."""


def cholesky_logdet(a) -> TensorND:
    """log det of a symmetric positive definite matrix (or stack of them).

    Computed as 2 * sum(log diag(L)) with L the Cholesky factor of the
    symmetric part (A + A^T)/2, so the gradient is the symmetric inverse.
    Leading axes are batch axes; the result has the batch shape.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"cholesky_logdet: expected (..., n, n), got {a.shape}")
    sym = 0.5 * (a.data + np.swapaxes(a.data, -1, -2))
    try:
        L = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(f"cholesky_logdet: matrix is not positive definite ({exc})") from None
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise NotSPDError("cholesky_logdet: non-positive pivot")
    out = 2.0 * np.log(diag).sum(axis=-1)

    def backward(g):
        n = a.shape[-1]
        eye = np.broadcast_to(np.eye(n), L.shape)
        # A^-1 = L^-T L^-1
        Linv = np.linalg.solve(L, eye)
        inv = np.swapaxes(Linv, -1, -2) @ Linv
        g = np.reshape(g, np.shape(out))
        return (np.asarray(g)[..., None, None] * inv,)

    return make_output("cholesky_logdet", np.asarray(out), (a,), backward)


def solve(a, b) -> TensorND:
    """X = A^-1 B for square A (batched over leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or b.shape[-2] != a.shape[-1]:
        raise ValueError(f"solve: shapes {a.shape} and {b.shape} do not conform")
    ad = a.data
    x = np.linalg.solve(ad, b.data)

    def backward(g):
        gb = np.linalg.solve(np.swapaxes(ad, -1, -2), g)
        ga = -gb @ np.swapaxes(x, -1, -2)
        return ga, gb

    return make_output("solve", x, (a, b), backward)
