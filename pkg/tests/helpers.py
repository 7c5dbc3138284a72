"""Shared test utilities: central finite-difference gradient checking."""

import numpy as np

from segprompt.tensor import Tape, Tensor, backward

RTOL = 1e-4
ATOL = 1e-7
EPS = 1e-5


def finite_difference(build, tensor: Tensor, eps: float = EPS) -> np.ndarray:
    """Central differences of build() (a fresh scalar loss) w.r.t. tensor."""
    num = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = build().item()
        flat[i] = orig - eps
        down = build().item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * eps)
    return num


def gradcheck(build, tensors, rtol: float = RTOL, atol: float = ATOL,
              eps: float = EPS) -> None:
    """Assert analytic gradients of build() match central differences.

    build must recompute the scalar loss from the tensors' current data each
    call; tensors are the leaves to check.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with Tape():
        loss = build()
        backward(loss)
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_difference(build, t, eps)
        err = np.abs(analytic - numeric)
        bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
        worst = (err - bound).max()
        assert (err <= bound).all(), (
            f"gradient mismatch: worst excess {worst:.3e}, "
            f"max analytic {np.abs(analytic).max():.3e}, "
            f"max numeric {np.abs(numeric).max():.3e}"
        )
