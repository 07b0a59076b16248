"""Central-difference gradient oracle, independent of the autodiff path.

Runs the forward function in float64 and compares analytic gradients against
(f(x + h) - f(x - h)) / 2h elementwise.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from plmoe.tensor import Tensor

FD_STEP = 1e-3
REL_TOL = 1e-3


def rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return np.abs(a - b) / denom


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = FD_STEP,
    tol: float = REL_TOL,
) -> None:
    """Assert analytic grads of scalar fn(*inputs) match central differences."""
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    assert out.data.size == 1, "gradcheck expects a scalar output"
    out.backward()

    for ti, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(fn(*[Tensor(x.data.copy()) for x in tensors]).data)
            flat[j] = orig - step
            lo = float(fn(*[Tensor(x.data.copy()) for x in tensors]).data)
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2.0 * step)
        err = rel_err(analytic, numeric)
        assert err.max() < tol, (
            f"input {ti}: max relative gradient error {err.max():.3e} at "
            f"{np.unravel_index(err.argmax(), err.shape)}"
        )
