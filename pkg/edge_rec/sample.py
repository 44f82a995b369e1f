"""Reverse diffusion: ancestral steps, inpainting and random-tiled sampling of large regions."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import Tensor

from .diffusion import NoiseSchedule, clip_values, forward_sample, posterior_params, predict_x0
from .gdit import GDiTModel
from .guard import ModelGuard
from .records import RatingDataset
from .xform import RatingScaler

logger = logging.getLogger(__name__)

Tile = Tuple[np.ndarray, np.ndarray]

# Independent random streams, keyed by (seed, purpose, indices...)
_PURPOSES = {"init": 0, "step": 1, "known": 2, "offset": 3}


def _seed_state(seed: int, purpose: str, *indices: int) -> int:
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(_PURPOSES[purpose], *indices))
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_stream(seed: int, purpose: str, *indices: int) -> torch.Generator:
    return torch.Generator().manual_seed(_seed_state(seed, purpose, *indices))


def numpy_stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(_seed_state(seed, purpose, *indices))


@dataclass
class SampleConfig:
    """
    Sampler settings.

    Attributes:
        seed: Base seed of every random stream
        clamp_x0: Clamp the clean estimate to the value bounds at each step
        tile_n: Tile rows for tiled sampling
        tile_m: Tile columns for tiled sampling
        threads: Worker threads for tiles within one step
    """
    seed: int = 0
    clamp_x0: bool = True
    tile_n: int = 64
    tile_m: int = 64
    threads: int = 1

    def __post_init__(self):
        if self.tile_n < 1 or self.tile_m < 1:
            raise ValueError(f"Tile must be at least 1x1, got {self.tile_n}x{self.tile_m}")
        if self.threads < 1:
            raise ValueError(f"threads must be at least 1, got {self.threads}")

    def to_dict(self) -> dict:
        return asdict(self)


def reverse_step(
    x_t: Tensor,
    t: int,
    eps_hat: Tensor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    clip: Optional[Tuple[float, float]] = (-1.0, 1.0),
) -> Tensor:
    """
    One ancestral step x_t -> x_{t-1}.

    The clean estimate (clamped to ``clip``) feeds the posterior mean; fresh
    standard normal noise scaled by sqrt(beta_tilde_t) is added, except at
    t = 1 where the mean is returned as is.
    """
    x0_hat = predict_x0(x_t, eps_hat, t, schedule, clip=clip)
    mean, variance = posterior_params(x0_hat, x_t, t, schedule)
    if t == 1:
        return mean
    z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + variance ** 0.5 * z


def tile_partition(size: int, tile: int, offset: int) -> List[np.ndarray]:
    """
    Split ``range(size)`` into consecutive chunks of ``tile`` after a cyclic shift.

    The last chunk is shorter when ``tile`` does not divide ``size``; chunks
    crossing the end wrap to the start.
    """
    if not 1 <= tile <= size:
        raise ValueError(f"Tile {tile} does not fit size {size}")
    order = np.roll(np.arange(size), -offset)
    return [order[start:start + tile] for start in range(0, size, tile)]


def check_partition(tiles: Sequence[Tile], n: int, m: int) -> None:
    """
    Raises:
        ValueError: Unless every cell of the n x m region lies in exactly one tile
    """
    cover = np.zeros((n, m), dtype=np.int64)
    for rows, cols in tiles:
        cover[np.ix_(rows, cols)] += 1
    if not np.all(cover == 1):
        raise ValueError(
            f"Tiling is not a partition: {int((cover == 0).sum())} cells uncovered, "
            f"{int((cover > 1).sum())} covered more than once"
        )


def random_tiling(n: int, m: int, tile_n: int, tile_m: int, rng: np.random.Generator) -> List[Tile]:
    """Tiles of a regular grid with random cyclic row and column offsets, in row-major order."""
    row_offset = int(rng.integers(n)) if tile_n < n else 0
    col_offset = int(rng.integers(m)) if tile_m < m else 0
    row_chunks = tile_partition(n, tile_n, row_offset)
    col_chunks = tile_partition(m, tile_m, col_offset)
    return [(rows, cols) for rows in row_chunks for cols in col_chunks]


class DiffusionSampler:
    """
    Reverse-diffusion sampler around a guarded model.

    Every method is a pure function of (model, inputs, seed): noise comes from
    streams keyed by seed, purpose, step and tile index. Generation, inpainting
    and tiled sampling use the same keys, so an all-false mask reproduces plain
    generation and a single whole-region tile reproduces inpainting.
    """

    def __init__(
        self,
        model: Union[GDiTModel, ModelGuard],
        schedule: NoiseSchedule,
        config: Optional[SampleConfig] = None,
        bounds: Tuple[float, float] = (-1.0, 1.0),
    ):
        """
        Args:
            model: Denoiser, or a guard shared with a trainer
            schedule: Schedule the model was trained with
            config: Sampler settings
            bounds: Range of valid diffusion values (the scaler's bounds)
        """
        self.guard = model if isinstance(model, ModelGuard) else ModelGuard(model)
        self.schedule = schedule
        self.config = config or SampleConfig()
        self.bounds = bounds

    @property
    def dtype(self) -> torch.dtype:
        return next(self.guard.model.parameters()).dtype

    @property
    def _clip(self) -> Optional[Tuple[float, float]]:
        return self.bounds if self.config.clamp_x0 else None

    def _tensor(self, array) -> Tensor:
        return torch.as_tensor(np.asarray(array), dtype=self.dtype)

    @torch.no_grad()
    def _denoise_step(self, model, x: Tensor, t: int, users: Tensor, items: Tensor, generator) -> Tensor:
        eps_hat = model(x, t, users, items)
        return reverse_step(x, t, eps_hat, self.schedule, generator, clip=self._clip)

    def _overwrite_known(self, x: Tensor, values: Tensor, mask: Tensor, t_prev: int, seed: int) -> Tensor:
        if t_prev == 0:
            return torch.where(mask, values, x)
        noise = torch.randn(values.shape, generator=torch_stream(seed, "known", t_prev + 1), dtype=values.dtype)
        return torch.where(mask, forward_sample(values, t_prev, noise, self.schedule), x)

    def _finish(self, x: Tensor, known_values: Optional[np.ndarray], known_mask: Optional[np.ndarray]) -> np.ndarray:
        out = clip_values(x.detach().to(torch.float64).numpy().copy(), self.bounds)
        if known_mask is not None:
            out[known_mask] = known_values[known_mask]
        return out

    def _run(
        self,
        user_features,
        item_features,
        known_values: Optional[np.ndarray],
        known_mask: Optional[np.ndarray],
        seed: int,
        step_fn: Callable,
    ) -> np.ndarray:
        users, items = self._tensor(user_features), self._tensor(item_features)
        n, m = len(users), len(items)
        x = torch.randn((n, m), generator=torch_stream(seed, "init"), dtype=self.dtype)
        values = mask = None
        if known_mask is not None:
            values, mask = self._tensor(known_values), torch.as_tensor(known_mask)

        for t in range(self.schedule.T, 0, -1):
            with torch.no_grad(), self.guard.inference() as model:
                x = step_fn(model, x, t, users, items)
            if mask is not None:
                x = self._overwrite_known(x, values, mask, t - 1, seed)
        return self._finish(x, known_values, known_mask)

    def _resolve_seed(self, seed: Optional[int]) -> int:
        return self.config.seed if seed is None else int(seed)

    def generate_patch(self, user_features, item_features, seed: Optional[int] = None) -> np.ndarray:
        """
        Sample an n x m patch from pure noise.

        Args:
            user_features: (n, d_u) features of the patch users
            item_features: (m, d_i) features of the patch items

        Returns:
            (n, m) float64 values within the bounds
        """
        seed = self._resolve_seed(seed)

        def step(model, x, t, users, items):
            return self._denoise_step(model, x, t, users, items, torch_stream(seed, "step", t, 0))

        return self._run(user_features, item_features, None, None, seed, step)

    def inpaint_patch(
        self,
        known_values: np.ndarray,
        known_mask: np.ndarray,
        user_features,
        item_features,
        seed: Optional[int] = None,
    ) -> np.ndarray:
        """
        Complete a patch conditioned on its known cells.

        After each reverse step known cells are replaced by their forward-noised
        values at the new step (exact values at step 0), so the output's known
        cells equal ``known_values`` bit for bit.
        """
        known_values = np.asarray(known_values, dtype=np.float64)
        known_mask = np.asarray(known_mask, dtype=bool)
        if known_values.shape != known_mask.shape:
            raise ValueError(f"Mask shape {known_mask.shape} does not match values {known_values.shape}")
        if known_values.shape != (len(user_features), len(item_features)):
            raise ValueError(
                f"Values {known_values.shape} do not align with "
                f"{len(user_features)} users and {len(item_features)} items"
            )
        seed = self._resolve_seed(seed)

        def step(model, x, t, users, items):
            return self._denoise_step(model, x, t, users, items, torch_stream(seed, "step", t, 0))

        return self._run(user_features, item_features, known_values, known_mask, seed, step)

    def tiled_sample(
        self,
        known_values: np.ndarray,
        known_mask: np.ndarray,
        user_features,
        item_features,
        tile_n: Optional[int] = None,
        tile_m: Optional[int] = None,
        seed: Optional[int] = None,
        on_tiling: Optional[Callable[[int, List[Tile]], None]] = None,
    ) -> np.ndarray:
        """
        Denoise a region larger than a patch.

        One noise state covers the region. At each step the region is tiled
        afresh (random cyclic grid offsets), each tile is denoised with its own
        users' and items' features, and known cells are overwritten as in
        ``inpaint_patch``.

        Args:
            known_values: (N, M) scaled values of the region
            known_mask: (N, M) known-cell mask
            user_features: (N, d_u)
            item_features: (M, d_i)
            tile_n: Tile rows (default from the config)
            tile_m: Tile columns (default from the config)
            seed: Overrides the config seed
            on_tiling: Called with (t, tiles) at every step

        Raises:
            ValueError: If the tile is larger than the region
        """
        known_values = np.asarray(known_values, dtype=np.float64)
        known_mask = np.asarray(known_mask, dtype=bool)
        n, m = known_values.shape
        tile_n = tile_n or self.config.tile_n
        tile_m = tile_m or self.config.tile_m
        if tile_n > n or tile_m > m:
            raise ValueError(f"Tile {tile_n}x{tile_m} is larger than the {n}x{m} region")
        seed = self._resolve_seed(seed)

        pool = ThreadPoolExecutor(max_workers=self.config.threads) if self.config.threads > 1 else None

        def step(model, x, t, users, items):
            tiles = random_tiling(n, m, tile_n, tile_m, numpy_stream(seed, "offset", t))
            check_partition(tiles, n, m)
            if on_tiling is not None:
                on_tiling(t, tiles)

            def denoise_tile(index: int) -> Tensor:
                rows, cols = (torch.as_tensor(a) for a in tiles[index])
                return self._denoise_step(
                    model, x[rows][:, cols], t, users[rows], items[cols],
                    torch_stream(seed, "step", t, index),
                )

            indices = range(len(tiles))
            results = list(pool.map(denoise_tile, indices)) if pool else [denoise_tile(i) for i in indices]
            out = torch.empty_like(x)
            for (rows, cols), result in zip(tiles, results):
                out[torch.as_tensor(rows)[:, None], torch.as_tensor(cols)[None, :]] = result
            return out

        try:
            logger.debug("Tiled sampling of a %dx%d region with %dx%d tiles", n, m, tile_n, tile_m)
            return self._run(user_features, item_features, known_values, known_mask, seed, step)
        finally:
            if pool is not None:
                pool.shutdown()


def export_predictions(
    region: np.ndarray,
    user_index: Sequence[int],
    item_index: Sequence[int],
    dataset: RatingDataset,
    scaler: RatingScaler,
    path: Union[str, Path],
) -> pd.DataFrame:
    """
    Write sampled values as ``user_id,item_id,predicted_rating`` on the rating scale.

    Args:
        region: (N, M) sampled diffusion values
        user_index: Dataset user index of each row
        item_index: Dataset item index of each column
        dataset: Supplies the raw ids
        scaler: Maps values back to ratings
        path: CSV destination
    """
    region = np.asarray(region)
    rows, cols = np.meshgrid(np.arange(region.shape[0]), np.arange(region.shape[1]), indexing="ij")
    frame = pd.DataFrame({
        "user_id": [dataset.user_ids[int(user_index[r])] for r in rows.ravel()],
        "item_id": [dataset.item_ids[int(item_index[c])] for c in cols.ravel()],
        "predicted_rating": np.atleast_1d(scaler.unscale(region.ravel())),
    })
    frame.to_csv(path, index=False)
    logger.info("Wrote %d predictions to %s", len(frame), path)
    return frame
