"""Small datasets and models shared by the tests."""

import torch
from torch import nn

from edge_rec.diffusion import make_linear_schedule
from edge_rec.gdit import GDiTConfig, build_model
from edge_rec.ingest import build_matrix, featurize
from edge_rec.sample_data import make_rank_one_dataset
from edge_rec.xform import RatingScaler


def small_setup(num_users=8, num_items=8, seed=0):
    """Rank-one dataset with its scaler, full matrix and features."""
    dataset = make_rank_one_dataset(num_users, num_items, seed=seed)
    scaler = RatingScaler(*dataset.rating_scale)
    matrix = build_matrix(dataset, scaler)
    features = featurize(dataset)
    return dataset, matrix, features, scaler


def small_config(features, d_model=16, n_heads=2, n_blocks=1):
    return GDiTConfig(
        d_model=d_model, n_heads=n_heads, n_blocks=n_blocks, mlp_ratio=2.0,
        d_user_in=features.d_user, d_item_in=features.d_item,
    )


def small_model(features, dtype=torch.float64, seed=0, gates=0.05):
    """A seeded model whose adaLN gates are nonzero, so every block does work."""
    model = build_model(small_config(features), dtype=dtype, seed=seed)
    if gates:
        generator = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for block in model.blocks:
                layer = block.adaLN_modulation[-1]
                layer.weight.copy_(gates * torch.randn(layer.weight.shape, generator=generator, dtype=dtype))
                layer.bias.copy_(gates * torch.randn(layer.bias.shape, generator=generator, dtype=dtype))
    return model


def short_schedule(T=10):
    return make_linear_schedule(T=T, beta_start=1e-3, beta_end=0.2)


def zero_output(model: nn.Module) -> nn.Module:
    """Make the model predict zero noise everywhere."""
    with torch.no_grad():
        model.out_proj.weight.zero_()
        model.out_proj.bias.zero_()
    return model
