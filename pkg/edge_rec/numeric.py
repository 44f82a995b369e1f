"""Differentiable primitives and finite-difference gradient verification.

The primitives are thin compositions of torch operations; their backward
passes come from autograd. ``gradient_check`` compares those analytic
gradients with central finite differences.
"""

from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import NonFiniteError


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias."""
    return F.linear(x, weight, bias)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    return torch.softmax(x, dim=-1)


def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-6) -> Tensor:
    """Normalize each feature vector (last axis) to mean 0 and variance 1, then apply gain and bias."""
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """
    Scaled dot-product attention.

    Args:
        q: (..., L, d) queries
        k: (..., S, d) keys
        v: (..., S, d_v) values
        mask: Optional boolean (L, S) or broadcastable mask, True where attention is allowed

    Returns:
        (..., L, d_v)
    """
    scores = q @ k.transpose(-2, -1) / (q.shape[-1] ** 0.5)
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return row_softmax(scores) @ v


def mean_square(x: Tensor) -> Tensor:
    return (x * x).mean()


def log_sigmoid(x: Tensor) -> Tensor:
    return F.logsigmoid(x)


def _finite_scalar(value: Tensor) -> float:
    value = float(value)
    if value != value or value in (float("inf"), float("-inf")):
        raise NonFiniteError(f"Function value is not finite: {value}")
    return value


def gradient_check(
    function: Callable[..., Tensor],
    point: Sequence[Tensor],
    direction_count: int = 8,
    generator: Optional[torch.Generator] = None,
    fd_dtype: torch.dtype = torch.float64,
) -> float:
    """
    Compare autograd gradients with central finite differences.

    For each random unit direction v over all inputs jointly, the analytic
    directional derivative <grad f(x), v> is compared with
    (f(x + h v) - f(x - h v)) / 2h, where h = eps^(1/3) * max(1, |x|_inf) and eps
    is the machine epsilon of ``fd_dtype``. Finite differences run in ``fd_dtype``
    (double by default) while the analytic gradient keeps the inputs' precision,
    so single-precision models are checked against a double-precision reference.

    Args:
        function: Maps the point tensors to a scalar tensor
        point: Input tensors
        direction_count: Number of random directions
        generator: Source of directions
        fd_dtype: Precision of the finite-difference evaluations

    Returns:
        Maximum relative error over all directions. Pairs whose magnitudes are
        both below sqrt(eps) * max(1, |f(x)|) count as agreeing (error 0).

    Raises:
        NonFiniteError: If the function is not finite at an evaluated point
    """
    inputs = [p.detach().clone().requires_grad_(True) for p in point]
    value = function(*inputs)
    f0 = _finite_scalar(value)
    grads = torch.autograd.grad(value, inputs, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]

    base = [p.detach().to(fd_dtype) for p in point]
    eps = torch.finfo(fd_dtype).eps
    scale = max([1.0] + [float(b.abs().max()) for b in base if b.numel()])
    h = eps ** (1.0 / 3.0) * scale
    zero_tol = eps ** 0.5 * max(1.0, abs(f0))

    worst = 0.0
    with torch.no_grad():
        for _ in range(direction_count):
            directions = [torch.randn(b.shape, dtype=fd_dtype, generator=generator) for b in base]
            norm = sum(float((d * d).sum()) for d in directions) ** 0.5
            if norm == 0.0:
                continue
            directions = [d / norm for d in directions]

            plus = _finite_scalar(function(*[b + h * d for b, d in zip(base, directions)]))
            minus = _finite_scalar(function(*[b - h * d for b, d in zip(base, directions)]))
            numeric = (plus - minus) / (2.0 * h)
            analytic = sum(float((g.to(fd_dtype) * d).sum()) for g, d in zip(grads, directions))

            magnitude = max(abs(numeric), abs(analytic))
            if magnitude <= zero_tol:
                continue
            worst = max(worst, abs(numeric - analytic) / magnitude)
    return worst
