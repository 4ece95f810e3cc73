"""Central-difference gradient oracle, independent of the tape."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumericsError, Tensor


def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, eps: float) -> Tensor:
    """Central difference (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps) per coordinate.

    ``f`` must be deterministic and return a scalar (Tensor or float). Never
    records anything on a tape; the function is simply evaluated 2*x.size
    times on perturbed copies.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(val):
            raise NumericsError("finite_difference_grad: f returned a non-finite value")
        return val

    base = np.asarray(x.data, dtype=x.data.dtype)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.reshape(-1).copy()
        bumped[i] += eps
        hi = evaluate(bumped.reshape(base.shape))
        bumped[i] -= 2 * eps
        lo = evaluate(bumped.reshape(base.shape))
        flat[i] = (hi - lo) / (2.0 * eps)
    return Tensor(grad)


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise deviation, scaled by the gradient's magnitude.

    ``max_i |a_i - n_i| / max(max_i |n_i|, tiny)`` -- a [0, 1]-scale metric
    that does not blow up on individual near-zero components.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale
