"""GDiT denoiser: row-column separable attention with adaLN-Zero timestep conditioning.

Interaction tokens have shape (batch, n users, m items, d). Attention never
mixes cells that share neither a row nor a column: self-attention runs along
each row and then along each column, and feature cross-attention lets a row
attend to item tokens and a column attend to user tokens.
"""

from dataclasses import asdict, dataclass
from typing import Optional, Union

import torch
from einops import rearrange, repeat
from torch import Tensor, nn

from .numeric import attention


@dataclass
class GDiTConfig:
    """
    Denoiser hyper-parameters.

    Attributes:
        d_model: Hidden width
        n_heads: Attention heads per direction
        n_blocks: Number of stacked GDiT blocks
        mlp_ratio: MLP hidden expansion
        d_user_in: Raw user feature width
        d_item_in: Raw item feature width
    """
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 1
    mlp_ratio: float = 4.0
    d_user_in: int = 24
    d_item_in: int = 20

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be at least 1, got {self.n_blocks}")
        if self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even for the timestep embedding, got {self.d_model}")
        if self.d_user_in < 1 or self.d_item_in < 1:
            raise ValueError("Feature widths must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GDiTConfig":
        return cls(**data)


def timestep_embedding(t: Union[int, Tensor], dim: int, dtype: Optional[torch.dtype] = None) -> Tensor:
    """
    Sinusoidal embedding [sin(t w_k), cos(t w_k)] with w_k = 10000^(-2k/dim).

    Args:
        t: Step, or a 1D tensor of steps
        dim: Embedding width (even)

    Returns:
        (dim,) for a scalar step, (B, dim) for a batch
    """
    if dim % 2 != 0:
        raise ValueError(f"Embedding width must be even, got {dim}")
    dtype = dtype or torch.get_default_dtype()
    steps = torch.as_tensor(t, dtype=dtype)
    k = torch.arange(dim // 2, dtype=dtype)
    omega = torch.pow(torch.tensor(10000.0, dtype=dtype), -2.0 * k / dim)
    args = steps.reshape(-1, 1) * omega
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if steps.dim() == 0 else emb


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale) + shift


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class MultiHeadAttention(nn.Module):
    """Multi-head attention over the second-to-last axis."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, context: Optional[Tensor] = None, mask: Optional[Tensor] = None) -> Tensor:
        """
        Args:
            x: (batch, L, dim) queries
            context: (batch, S, dim) keys and values; defaults to ``x``
            mask: Optional boolean (L, S) mask, True where attention is allowed
        """
        context = x if context is None else context
        q, k, v = (
            rearrange(proj(src), "b l (h e) -> b h l e", h=self.heads)
            for proj, src in ((self.to_q, x), (self.to_k, context), (self.to_v, context))
        )
        out = attention(q, k, v, mask)
        return self.to_out(rearrange(out, "b h l e -> b l (h e)"))


class RowColumnSelfAttention(nn.Module):
    """Attention along each row (over items), then along each column (over users)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.row = MultiHeadAttention(dim, heads)
        self.col = MultiHeadAttention(dim, heads)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4:
            raise ValueError(f"Expected (batch, n, m, d) tokens, got shape {tuple(x.shape)}")
        b = x.shape[0]
        rows = self.row(rearrange(x, "b n m d -> (b n) m d"))
        x = rearrange(rows, "(b n) m d -> b n m d", b=b)
        cols = self.col(rearrange(x, "b n m d -> (b m) n d"))
        return rearrange(cols, "(b m) n d -> b n m d", b=b)


class RowColumnCrossAttention(nn.Module):
    """
    Feature cross-attention: each row's cells attend to the patch's item tokens,
    then each column's cells attend to the patch's user tokens.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.row = MultiHeadAttention(dim, heads)
        self.col = MultiHeadAttention(dim, heads)

    def forward(self, x: Tensor, user_tokens: Tensor, item_tokens: Tensor) -> Tensor:
        b, n, m, _ = x.shape
        if user_tokens.shape[:2] != (b, n) or item_tokens.shape[:2] != (b, m):
            raise ValueError(
                f"Token counts {tuple(user_tokens.shape[:2])} / {tuple(item_tokens.shape[:2])} "
                f"do not match a {n}x{m} patch batch of {b}"
            )
        items = repeat(item_tokens, "b m d -> (b n) m d", n=n)
        rows = self.row(rearrange(x, "b n m d -> (b n) m d"), items)
        x = rearrange(rows, "(b n) m d -> b n m d", b=b)
        users = repeat(user_tokens, "b n d -> (b m) n d", m=m)
        cols = self.col(rearrange(x, "b n m d -> (b m) n d"), users)
        return rearrange(cols, "(b m) n d -> b n m d", b=b)


class FeatureEncoder(nn.Module):
    """Projects one side's raw features and mixes them with a post-norm self-attention block."""

    def __init__(self, d_in: int, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.d_in = d_in
        self.proj = nn.Linear(d_in, dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.d_in:
            raise ValueError(f"Expected feature width {self.d_in}, got {features.shape[-1]}")
        h = self.proj(features)
        h = self.norm1(h + self.attn(h))
        return self.norm2(h + self.mlp(h))


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(timestep_embedding(t, self.dim, dtype=self.mlp[0].weight.dtype))


class GDiTBlock(nn.Module):
    """
    Three adaLN-Zero sub-layers: row-column self-attention, feature
    cross-attention and an MLP. Each normalizes, applies the timestep shift and
    scale, runs the sub-layer, multiplies by the timestep gate and adds the
    residual. Gates start at zero, so a fresh block is the identity.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.self_attn = RowColumnSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.cross_attn = RowColumnCrossAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 9 * dim))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x: Tensor, c: Tensor, user_tokens: Tensor, item_tokens: Tensor) -> Tensor:
        """
        Args:
            x: (batch, n, m, d) interaction tokens
            c: (batch, d) timestep conditioning
            user_tokens: (batch, n, d)
            item_tokens: (batch, m, d)
        """
        (shift1, scale1, gate1, shift2, scale2, gate2,
         shift3, scale3, gate3) = self.adaLN_modulation(c)[:, None, None, :].chunk(9, dim=-1)
        x = x + gate1 * self.self_attn(modulate(self.norm1(x), shift1, scale1))
        x = x + gate2 * self.cross_attn(modulate(self.norm2(x), shift2, scale2), user_tokens, item_tokens)
        x = x + gate3 * self.mlp(modulate(self.norm3(x), shift3, scale3))
        return x


class GDiTModel(nn.Module):
    """The noise predictor eps_theta(x_t, t, U, I)."""

    def __init__(self, config: GDiTConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.in_proj = nn.Linear(1, d)
        self.t_embedder = TimestepEmbedder(d)
        self.user_encoder = FeatureEncoder(config.d_user_in, d, config.n_heads, config.mlp_ratio)
        self.item_encoder = FeatureEncoder(config.d_item_in, d, config.n_heads, config.mlp_ratio)
        self.blocks = nn.ModuleList(
            GDiTBlock(d, config.n_heads, config.mlp_ratio) for _ in range(config.n_blocks)
        )
        self.final_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, 1)

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x_t: Tensor, t: Union[int, Tensor], user_features: Tensor, item_features: Tensor) -> Tensor:
        """
        Predict the noise in ``x_t``.

        Args:
            x_t: (n, m) or (batch, n, m) noised interaction strengths
            t: Step, or (batch,) steps
            user_features: (n, d_u) or (batch, n, d_u), aligned with the rows
            item_features: (m, d_i) or (batch, m, d_i), aligned with the columns

        Returns:
            Noise prediction with the shape of ``x_t``
        """
        unbatched = x_t.dim() == 2
        if unbatched:
            x_t, user_features, item_features = x_t[None], user_features[None], item_features[None]
        b, n, m = x_t.shape
        if user_features.shape[:2] != (b, n) or item_features.shape[:2] != (b, m):
            raise ValueError(
                f"Features {tuple(user_features.shape)} / {tuple(item_features.shape)} "
                f"do not align with x_t {tuple(x_t.shape)}"
            )
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(b)

        h = self.in_proj(x_t[..., None])
        c = self.t_embedder(t)
        user_tokens = self.user_encoder(user_features)
        item_tokens = self.item_encoder(item_features)
        for block in self.blocks:
            h = block(h, c, user_tokens, item_tokens)
        eps_hat = self.out_proj(self.final_norm(h)).squeeze(-1)
        return eps_hat[0] if unbatched else eps_hat


def model_forward(x_t: Tensor, t, user_features: Tensor, item_features: Tensor, model: GDiTModel) -> Tensor:
    return model(x_t, t, user_features, item_features)


def build_model(config: GDiTConfig, dtype: torch.dtype = torch.float32, seed: Optional[int] = None) -> GDiTModel:
    """Construct a model, optionally with seeded initialization."""
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = GDiTModel(config)
    else:
        model = GDiTModel(config)
    return model.to(dtype)

