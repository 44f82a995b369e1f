"""Noise schedules and closed-form DDPM quantities.

Tables are stored with a leading t = 0 entry (beta 0, alpha_bar 1) so every
quantity is indexed by its step number directly. The functions below accept
Python floats, numpy arrays or torch tensors; ``t`` may be an int or, for a
batch, an integer tensor with one step per leading-axis entry.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """
    beta_t, alpha_t, alpha_bar_t and beta_tilde_t for t = 0..T.

    Attributes:
        beta: Per-step noise variance, ``beta[0] == 0``
        kind: Schedule family the betas came from (recorded in checkpoints)
    """
    beta: np.ndarray
    kind: str = "explicit"
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    beta_tilde: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 2 or beta[0] != 0.0:
            raise ValueError("beta must be a 1D table with beta[0] == 0 and T >= 1")
        steps = beta[1:]
        if np.any(steps <= 0.0) or np.any(steps >= 1.0):
            raise ValueError("Every beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        beta_tilde = np.zeros_like(beta)
        beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * steps
        if np.any(np.diff(alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "beta_tilde", beta_tilde)

    @classmethod
    def from_betas(cls, betas: Sequence[float], kind: str = "explicit") -> "NoiseSchedule":
        """Build from beta_1..beta_T."""
        return cls(np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)]), kind=kind)

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def check_step(self, t, lowest: int = 1) -> None:
        steps = t.tolist() if torch.is_tensor(t) else np.atleast_1d(t).tolist()
        bad = [s for s in steps if not lowest <= s <= self.T]
        if bad:
            raise ValueError(f"Steps {bad} outside [{lowest}, {self.T}]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "betas": self.beta[1:].tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls.from_betas(data["betas"], kind=data["kind"])

    def __repr__(self) -> str:
        return f"NoiseSchedule({self.kind}, T={self.T}, beta=[{self.beta[1]:g}..{self.beta[-1]:g}])"


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """
    Linear betas from ``beta_start`` (t = 1) to ``beta_end`` (t = T).

    Raises:
        ValueError: Unless T >= 1 and 0 < beta_start <= beta_end < 1
    """
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T), kind="linear")


def make_cosine_schedule(T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Betas from a squared-cosine alpha_bar curve, capped at ``max_beta``."""
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, max_beta)
    return NoiseSchedule.from_betas(betas, kind="cosine")


def _coef(table: np.ndarray, t, like):
    """Table entry for step t, shaped to broadcast against ``like``."""
    if torch.is_tensor(t):
        values = torch.as_tensor(table, dtype=like.dtype if torch.is_tensor(like) else torch.float64)[t]
        return values.reshape(-1, *([1] * (like.dim() - 1))) if torch.is_tensor(like) else values
    return float(table[int(t)])


def _sqrt(x):
    return x.sqrt() if torch.is_tensor(x) else math.sqrt(x)


def _shape(x) -> tuple:
    return tuple(x.shape) if hasattr(x, "shape") else ()


def forward_sample(x0, t, eps, schedule: NoiseSchedule):
    """
    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    Raises:
        ValueError: If ``eps`` and ``x0`` differ in shape or t is outside [1, T]
    """
    if _shape(eps) != _shape(x0):
        raise ValueError(f"eps shape {_shape(eps)} does not match x0 shape {_shape(x0)}")
    schedule.check_step(t)
    alpha_bar = _coef(schedule.alpha_bar, t, x0)
    return _sqrt(alpha_bar) * x0 + _sqrt(1.0 - alpha_bar) * eps


def posterior_params(x0, x_t, t, schedule: NoiseSchedule):
    """
    Mean and variance of q(x_{t-1} | x_t, x0).

    Returns:
        (mean, beta_tilde_t); the variance is a scalar (per-sample for a batch of steps)

    Raises:
        ValueError: If t is outside [1, T]
    """
    schedule.check_step(t)
    t_prev = t - 1
    beta = _coef(schedule.beta, t, x0)
    alpha = _coef(schedule.alpha, t, x0)
    alpha_bar = _coef(schedule.alpha_bar, t, x0)
    alpha_bar_prev = _coef(schedule.alpha_bar, t_prev, x0)
    x0_coef = _sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)
    xt_coef = _sqrt(alpha) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    mean = x0_coef * x0 + xt_coef * x_t
    return mean, _coef(schedule.beta_tilde, t, x0)


def clip_values(x, bounds: Optional[Tuple[float, float]]):
    if bounds is None:
        return x
    low, high = bounds
    if torch.is_tensor(x):
        return x.clamp(low, high)
    clipped = np.clip(x, low, high)
    return float(clipped) if np.ndim(clipped) == 0 else clipped


def predict_x0(x_t, eps_hat, t, schedule: NoiseSchedule, clip: Optional[Tuple[float, float]] = (-1.0, 1.0)):
    """
    Invert the closed form: x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t).

    Args:
        clip: Bounds to clamp x0_hat to, or None to return the raw estimate
    """
    schedule.check_step(t)
    alpha_bar = _coef(schedule.alpha_bar, t, x_t)
    x0_hat = (x_t - _sqrt(1.0 - alpha_bar) * eps_hat) / _sqrt(alpha_bar)
    return clip_values(x0_hat, clip)
