"""Finite-difference gradient suite over the primitives, the GDiT sub-layers and the full model."""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.func import functional_call

from . import numeric
from .diffusion import forward_sample, make_linear_schedule
from .gdit import (
    FeatureEncoder,
    GDiTBlock,
    GDiTConfig,
    GDiTModel,
    MultiHeadAttention,
    RowColumnCrossAttention,
    RowColumnSelfAttention,
    TimestepEmbedder,
)
from .numeric import gradient_check
from .train import diffusion_loss

logger = logging.getLogger(__name__)

TOLERANCES = {torch.float64: 1e-6, torch.float32: 1e-4}


@dataclass
class GradientCheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<28} rel-err {self.error:.3e} (tol {self.tolerance:.0e}) {status}"


def _weighted_sum(fn: Callable[..., Tensor], shape, generator: torch.Generator) -> Callable[..., Tensor]:
    """Reduce a tensor-valued function to a scalar with fixed random weights."""
    weight = torch.randn(shape, generator=generator, dtype=torch.float64)

    def scalar(*args):
        out = fn(*args)
        return (out * weight.to(out.dtype)).sum()

    return scalar


def _module_function(module: nn.Module, n_inputs: int, call: Optional[Callable] = None) -> Callable[..., Tensor]:
    """
    Function of (*inputs, *parameters) running ``module`` with the given parameters.

    ``call(forward, dtype, *inputs)`` customizes the invocation; by default the
    module is called on the inputs directly.
    """
    names = [name for name, _ in module.named_parameters()]

    def fn(*args):
        inputs, params = args[:n_inputs], args[n_inputs:]
        state = dict(zip(names, params))

        def forward(*xs):
            return functional_call(module, state, xs)

        if call is None:
            return forward(*inputs)
        return call(forward, params[0].dtype, *inputs)

    return fn


def _randomize(module: nn.Module, generator: torch.Generator, scale: float = 0.3) -> nn.Module:
    """Replace every parameter with random values, so zero-initialized gates are exercised."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))
    return module


def _params(module: nn.Module) -> List[Tensor]:
    return [p.detach().clone() for p in module.parameters()]


def _check(name: str, fn, point: Sequence[Tensor], dtype: torch.dtype, generator, directions: int) -> GradientCheckResult:
    point = [p.to(dtype) for p in point]
    error = gradient_check(fn, point, direction_count=directions, generator=generator)
    result = GradientCheckResult(name, error, TOLERANCES[dtype])
    logger.debug("%s", result)
    return result


def run_gradient_suite(precision: str = "double", seed: int = 0, directions: int = 6) -> List[GradientCheckResult]:
    """
    Check every differentiable building block against central finite differences.

    Args:
        precision: "double" (tolerance 1e-6) or "single" (tolerance 1e-4)
        seed: Seeds points, weights and directions
        directions: Random directions per check

    Returns:
        One result per check, in a fixed order
    """
    dtype = {"double": torch.float64, "single": torch.float32}[precision]
    g = torch.Generator().manual_seed(seed)

    def randn(*shape):
        return torch.randn(shape, generator=g, dtype=torch.float64)

    results = []

    def add(name, fn, point):
        results.append(_check(name, fn, point, dtype, g, directions))

    # Primitives
    add("affine", _weighted_sum(numeric.affine, (3, 4), g), [randn(3, 5), randn(4, 5), randn(4)])
    add("row_softmax", _weighted_sum(numeric.row_softmax, (3, 5), g), [randn(3, 5)])
    add("layer_norm", _weighted_sum(numeric.layer_norm, (3, 6), g), [randn(3, 6), randn(6), randn(6)])
    add("gelu", _weighted_sum(numeric.gelu, (4, 3), g), [randn(4, 3)])
    mask = torch.ones(4, 5, dtype=torch.bool)
    mask[0, 1:] = False
    mask[2, :2] = False
    add(
        "attention (masked)",
        _weighted_sum(lambda q, k, v: numeric.attention(q, k, v, mask), (4, 3), g),
        [randn(4, 2), randn(5, 2), randn(5, 3)],
    )
    add("mean_square", numeric.mean_square, [randn(3, 4)])
    add("log_sigmoid", lambda x: numeric.log_sigmoid(x).sum(), [randn(6)])

    # Sub-layers
    d, heads = 8, 2
    mha = _randomize(MultiHeadAttention(d, heads).double(), g)
    add(
        "multi_head_attention",
        _weighted_sum(_module_function(mha, 2, None), (2, 3, d), g),
        [randn(2, 3, d), randn(2, 4, d), *_params(mha)],
    )
    rcsa = _randomize(RowColumnSelfAttention(d, heads).double(), g)
    add(
        "row_column_self_attention",
        _weighted_sum(_module_function(rcsa, 1, None), (1, 3, 4, d), g),
        [randn(1, 3, 4, d), *_params(rcsa)],
    )
    cross = _randomize(RowColumnCrossAttention(d, heads).double(), g)
    add(
        "row_column_cross_attention",
        _weighted_sum(_module_function(cross, 3, None), (1, 3, 4, d), g),
        [randn(1, 3, 4, d), randn(1, 3, d), randn(1, 4, d), *_params(cross)],
    )
    encoder = _randomize(FeatureEncoder(5, d, heads, 2.0).double(), g)
    add(
        "feature_encoder",
        _weighted_sum(_module_function(encoder, 1, None), (1, 3, d), g),
        [randn(1, 3, 5), *_params(encoder)],
    )
    embedder = _randomize(TimestepEmbedder(d).double(), g)
    steps = torch.tensor([3, 17])
    add(
        "timestep_embedder",
        _weighted_sum(_module_function(embedder, 0, lambda f, dtype: f(steps)), (2, d), g),
        _params(embedder),
    )
    block = _randomize(GDiTBlock(d, heads, 2.0).double(), g)
    add(
        "gdit_block",
        _weighted_sum(_module_function(block, 4, None), (1, 3, 4, d), g),
        [randn(1, 3, 4, d), randn(1, d), randn(1, 3, d), randn(1, 4, d), *_params(block)],
    )

    # Full one-block model on a 4x4 patch, through the training loss
    config = GDiTConfig(d_model=d, n_heads=heads, n_blocks=1, mlp_ratio=2.0, d_user_in=3, d_item_in=2)
    model = _randomize(GDiTModel(config).double(), g)
    add(
        "gdit_model",
        _weighted_sum(_module_function(model, 3, lambda f, dtype, x, u, i: f(x, 7, u, i)), (4, 4), g),
        [randn(4, 4), randn(4, 3), randn(4, 2), *_params(model)],
    )
    schedule = make_linear_schedule(T=10)
    x0 = torch.tanh(randn(4, 4))
    eps = randn(4, 4)
    x_t = forward_sample(x0, 5, eps, schedule)
    users, items = randn(4, 3), randn(4, 2)
    known = torch.ones(4, 4, dtype=torch.bool)

    def training_loss(forward, dtype):
        eps_hat = forward(x_t.to(dtype), 5, users.to(dtype), items.to(dtype))
        terms = diffusion_loss(
            eps.to(dtype), eps_hat, x_t.to(dtype), 5, x0.to(dtype), known, schedule,
            bpr_weight=0.1, rng=np.random.default_rng(seed),
        )
        return terms.total

    add("gdit_model_loss", _module_function(model, 0, training_loss), _params(model))

    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning("Gradient checks failed: %s", ", ".join(failed))
    return results

