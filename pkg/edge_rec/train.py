"""Training loop: patch batches, the epsilon-MSE objective with BPR regularization, AdamW updates."""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from torch import Tensor
from tqdm import tqdm

from .checkpoint import Checkpoint, save_checkpoint
from .density import dense_region, density_sort, sample_patch
from .diffusion import NoiseSchedule, forward_sample, make_linear_schedule, predict_x0
from .errors import ConfigMismatchError, TrainingDivergedError
from .gdit import GDiTConfig, GDiTModel, build_model
from .guard import ModelGuard
from .ingest import build_matrix, featurize
from .matrix import FeatureTable, InteractionMatrix, Patch
from .numeric import log_sigmoid
from .records import RatingDataset
from .xform import RatingScaler, TransformMode

logger = logging.getLogger(__name__)

PRECISIONS = {"single": torch.float32, "double": torch.float64}


def resolve_dtype(precision: Union[str, torch.dtype]) -> torch.dtype:
    if isinstance(precision, torch.dtype):
        return precision
    if precision not in PRECISIONS:
        raise ValueError(f"Unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")
    return PRECISIONS[precision]


@dataclass
class TrainConfig:
    """
    Training hyper-parameters.

    Attributes:
        iterations: Optimizer updates
        batch_size: Patches per update
        patch_n: Users per patch
        patch_m: Items per patch
        min_density: Required known-cell fraction of each sampled patch
        learning_rate: AdamW step size
        weight_decay: AdamW decoupled weight decay
        bpr_weight: Weight of the BPR term (lambda)
        bpr_pairs_per_user: Ranked pairs sampled per patch user
        mask_unknown_in_loss: Restrict the epsilon-MSE to known cells
        seed: Seeds initialization, patch sampling, steps and noise
        subgraph_density: If set, sample patches only inside the dense corner
            reaching this label density
        checkpoint_every: Iterations between periodic checkpoints
        precision: "single" or "double"
    """
    iterations: int = 10000
    batch_size: int = 16
    patch_n: int = 50
    patch_m: int = 50
    min_density: float = 0.0
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    bpr_weight: float = 0.1
    bpr_pairs_per_user: int = 4
    mask_unknown_in_loss: bool = False
    seed: int = 0
    subgraph_density: Optional[float] = None
    checkpoint_every: int = 1000
    precision: str = "single"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be at least 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.patch_n < 1 or self.patch_m < 1:
            raise ValueError(f"Patch must be at least 1x1, got {self.patch_n}x{self.patch_m}")
        if self.bpr_weight < 0:
            raise ValueError(f"bpr_weight must be non-negative, got {self.bpr_weight}")
        if self.bpr_pairs_per_user < 0:
            raise ValueError(f"bpr_pairs_per_user must be non-negative, got {self.bpr_pairs_per_user}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be at least 1, got {self.checkpoint_every}")
        resolve_dtype(self.precision)

    @property
    def dtype(self) -> torch.dtype:
        return resolve_dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


class LossTerms(NamedTuple):
    total: Tensor
    mse: Tensor
    bpr: Tensor

    def as_floats(self) -> dict:
        return {"total": float(self.total), "mse": float(self.mse), "bpr": float(self.bpr)}


@dataclass
class PatchBatch:
    """
    Patches stacked for one optimizer update.

    Attributes:
        values: (B, n, m) scaled values
        known: (B, n, m) boolean mask
        user_features: (B, n, d_u)
        item_features: (B, m, d_i)
        patches: The source patches
    """
    values: Tensor
    known: Tensor
    user_features: Tensor
    item_features: Tensor
    patches: List[Patch] = field(default_factory=list)

    @classmethod
    def from_patches(
        cls,
        patches: Sequence[Patch],
        matrix: InteractionMatrix,
        features: FeatureTable,
        dtype: torch.dtype = torch.float32,
    ) -> "PatchBatch":
        if not patches:
            raise ValueError("A batch needs at least one patch")
        aligned = [features.for_patch(matrix, p) for p in patches]
        return cls(
            values=torch.as_tensor(np.stack([p.values for p in patches]), dtype=dtype),
            known=torch.as_tensor(np.stack([p.known for p in patches])),
            user_features=torch.as_tensor(np.stack([u for u, _ in aligned]), dtype=dtype),
            item_features=torch.as_tensor(np.stack([i for _, i in aligned]), dtype=dtype),
            patches=list(patches),
        )

    def __len__(self) -> int:
        return self.values.shape[0]


def sample_bpr_pairs(values: np.ndarray, known: np.ndarray, pairs_per_user: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw ranked item pairs for BPR.

    For each row, candidate pairs are ordered (positive, negative) columns that
    are both known with value(positive) > value(negative). Up to
    ``pairs_per_user`` are drawn without replacement.

    Returns:
        (P, 3) int array of (row, positive column, negative column)
    """
    values = np.asarray(values)
    known = np.asarray(known, dtype=bool)
    drawn = []
    for row in range(values.shape[0]):
        cols = np.flatnonzero(known[row])
        if len(cols) < 2 or pairs_per_user == 0:
            continue
        v = values[row, cols]
        pos, neg = np.nonzero(v[:, None] > v[None, :])
        if len(pos) == 0:
            continue
        if len(pos) > pairs_per_user:
            keep = np.sort(rng.choice(len(pos), size=pairs_per_user, replace=False))
            pos, neg = pos[keep], neg[keep]
        drawn.append(np.stack([np.full(len(pos), row), cols[pos], cols[neg]], axis=1))
    if not drawn:
        return np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(drawn).astype(np.int64)


def diffusion_loss(
    eps: Tensor,
    eps_hat: Tensor,
    x_t: Tensor,
    t,
    values: Tensor,
    known: Tensor,
    schedule: NoiseSchedule,
    bpr_weight: float,
    rng: np.random.Generator,
    pairs_per_user: int = 4,
    mask_unknown: bool = False,
) -> LossTerms:
    """
    Epsilon-MSE plus weighted BPR on the single-step clean estimate.

    Accepts one patch, shape (n, m), or a batch, shape (B, n, m) with ``t`` of
    shape (B,). The BPR term compares the unclamped x0 estimate at pairs drawn
    from the true values and averages over all pairs of the batch; it is 0 if
    no pair exists.

    Args:
        eps: Injected noise
        eps_hat: Predicted noise
        x_t: Noised values
        t: Step(s) of ``x_t``
        values: True scaled values
        known: Known-cell mask
        schedule: Noise schedule
        bpr_weight: Lambda
        rng: Pair sampling source
        pairs_per_user: Pairs drawn per row
        mask_unknown: Average the MSE over known cells only
    """
    if eps.shape != eps_hat.shape or eps.shape != x_t.shape or eps.shape != values.shape:
        raise ValueError(
            f"Shape mismatch: eps {tuple(eps.shape)}, eps_hat {tuple(eps_hat.shape)}, "
            f"x_t {tuple(x_t.shape)}, values {tuple(values.shape)}"
        )
    if bpr_weight < 0:
        raise ValueError(f"bpr_weight must be non-negative, got {bpr_weight}")

    squared = (eps - eps_hat) ** 2
    if mask_unknown:
        weight = known.to(squared.dtype)
        mse = (squared * weight).sum() / weight.sum().clamp_min(1.0)
    else:
        mse = squared.mean()

    unbatched = eps.dim() == 2
    x0_hat = predict_x0(x_t, eps_hat, t, schedule, clip=None)
    if unbatched:
        x0_hat, values, known = x0_hat[None], values[None], known[None]

    batch_idx, rows, pos, neg = [], [], [], []
    true_values = values.detach().cpu().numpy()
    known_np = known.detach().cpu().numpy()
    for b in range(true_values.shape[0]):
        pairs = sample_bpr_pairs(true_values[b], known_np[b], pairs_per_user, rng)
        batch_idx.extend([b] * len(pairs))
        rows.extend(pairs[:, 0].tolist())
        pos.extend(pairs[:, 1].tolist())
        neg.extend(pairs[:, 2].tolist())

    if batch_idx:
        diff = x0_hat[batch_idx, rows, pos] - x0_hat[batch_idx, rows, neg]
        bpr = -log_sigmoid(diff).mean()
    else:
        bpr = torch.zeros((), dtype=mse.dtype)

    return LossTerms(total=mse + bpr_weight * bpr, mse=mse, bpr=bpr)


def make_optimizer(model: GDiTModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=config.weight_decay,
    )


def train_step(
    model: GDiTModel,
    optimizer: torch.optim.Optimizer,
    batch: PatchBatch,
    schedule: NoiseSchedule,
    config: TrainConfig,
    generator: torch.Generator,
    rng: np.random.Generator,
    iteration: int = 0,
) -> LossTerms:
    """
    One optimizer update on a batch.

    Each patch gets its own uniformly drawn step t in 1..T and fresh noise.

    Raises:
        TrainingDivergedError: If the loss is not finite; parameters are left untouched
    """
    if len(batch) == 0:
        raise ValueError("Cannot train on an empty batch")
    t = torch.randint(1, schedule.T + 1, (len(batch),), generator=generator)
    eps = torch.randn(batch.values.shape, generator=generator, dtype=batch.values.dtype)
    x_t = forward_sample(batch.values, t, eps, schedule)
    eps_hat = model(x_t, t, batch.user_features, batch.item_features)
    terms = diffusion_loss(
        eps, eps_hat, x_t, t, batch.values, batch.known, schedule,
        bpr_weight=config.bpr_weight,
        rng=rng,
        pairs_per_user=config.bpr_pairs_per_user,
        mask_unknown=config.mask_unknown_in_loss,
    )
    if not torch.isfinite(terms.total):
        raise TrainingDivergedError(iteration, t.tolist())

    optimizer.zero_grad()
    terms.total.backward()
    optimizer.step()
    return LossTerms(*(term.detach() for term in terms))


class Trainer:
    """
    Runs training over freshly sampled patch batches.

    The model sits behind a ``ModelGuard``; every optimizer update holds the
    update side, so samplers sharing the guard never see a half-applied step.
    """

    def __init__(
        self,
        matrix: InteractionMatrix,
        features: FeatureTable,
        config: TrainConfig,
        scaler: RatingScaler,
        model_config: Optional[GDiTConfig] = None,
        schedule: Optional[NoiseSchedule] = None,
        run_info: Optional[dict] = None,
    ):
        """
        Args:
            matrix: Training interaction matrix
            features: User and item features of the dataset
            config: Training configuration
            scaler: Scaler the matrix was built with (stored in checkpoints)
            model_config: Architecture; defaults to one block sized to the features
            schedule: Noise schedule; defaults to the linear 1000-step schedule
            run_info: Extra entries recorded with the training config in checkpoints
        """
        self.config = config
        self.run_info = dict(run_info or {})
        self.scaler = scaler
        self.features = features
        self.schedule = schedule or make_linear_schedule()
        self.model_config = model_config or GDiTConfig(
            d_user_in=features.d_user, d_item_in=features.d_item
        )
        if (self.model_config.d_user_in, self.model_config.d_item_in) != (features.d_user, features.d_item):
            raise ConfigMismatchError(
                f"Model expects feature widths ({self.model_config.d_user_in}, "
                f"{self.model_config.d_item_in}), dataset has ({features.d_user}, {features.d_item})"
            )

        self.region = None
        if config.subgraph_density is not None:
            matrix = density_sort(matrix)
            side = dense_region(matrix, config.subgraph_density)
            self.region = (side, side)
        self.matrix = matrix

        model = build_model(self.model_config, dtype=config.dtype, seed=config.seed)
        self.guard: ModelGuard[GDiTModel] = ModelGuard(model)
        self.optimizer = make_optimizer(model, config)
        self.rng = np.random.default_rng(config.seed)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.iteration = 0
        self.history: List[dict] = []
        self.visited_users = set()
        self.visited_items = set()

    @property
    def model(self) -> GDiTModel:
        return self.guard.model

    def sample_batch(self) -> PatchBatch:
        patches = [
            sample_patch(
                self.matrix, self.config.patch_n, self.config.patch_m,
                self.config.min_density, self.rng, region=self.region,
            )
            for _ in range(self.config.batch_size)
        ]
        for p in patches:
            self.visited_users.update(self.matrix.row_ids[p.user_rows].tolist())
            self.visited_items.update(self.matrix.col_ids[p.item_cols].tolist())
        return PatchBatch.from_patches(patches, self.matrix, self.features, self.config.dtype)

    def step(self) -> dict:
        """Sample a batch and apply one update; returns the loss terms as floats."""
        batch = self.sample_batch()
        with self.guard.update() as model:
            model.train()
            terms = train_step(
                model, self.optimizer, batch, self.schedule, self.config,
                self.generator, self.rng, iteration=self.iteration + 1,
            )
        self.iteration += 1
        row = {"iteration": self.iteration, **terms.as_floats()}
        self.history.append(row)
        logger.debug("Iteration %d: %s", self.iteration, row)
        return row

    def checkpoint(self) -> Checkpoint:
        with self.guard.inference() as model:
            return Checkpoint.from_model(
                model, self.schedule, self.scaler,
                iteration=self.iteration,
                rng_state={
                    "numpy": self.rng.bit_generator.state,
                    "torch": self.generator.get_state().numpy(),
                },
                train_config={**self.config.to_dict(), **self.run_info},
            )

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["iteration", "total", "mse", "bpr"])

    def coverage(self) -> tuple:
        """Fractions of dataset users and items visited by sampled patches so far."""
        num_users = len(self.features.user_features)
        num_items = len(self.features.item_features)
        return len(self.visited_users) / num_users, len(self.visited_items) / num_items

    def run(self, out_dir: Optional[Union[str, Path]] = None, progress: bool = False) -> Checkpoint:
        """
        Train for ``config.iterations`` updates.

        With ``out_dir``, writes ``iter_<N>.ckpt`` every ``checkpoint_every``
        iterations, ``final.ckpt`` at the end and the loss trace ``loss.csv``.
        """
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)

        logger.info(
            "Training %d iterations, batch %d, patch %dx%d, %d parameters",
            self.config.iterations, self.config.batch_size,
            self.config.patch_n, self.config.patch_m, self.model.num_parameters,
        )
        bar = tqdm(range(self.config.iterations), disable=not progress, desc="train")
        for _ in bar:
            row = self.step()
            bar.set_postfix(loss=f"{row['total']:.4f}")
            if out is not None and self.iteration % self.config.checkpoint_every == 0:
                save_checkpoint(self.checkpoint(), out / f"iter_{self.iteration}.ckpt")
                self.loss_frame().to_csv(out / "loss.csv", index=False)

        final = self.checkpoint()
        if out is not None:
            save_checkpoint(final, out / "final.ckpt")
            self.loss_frame().to_csv(out / "loss.csv", index=False)

        users, items = self.coverage()
        logger.info("Visited %.1f%% of users and %.1f%% of items", 100 * users, 100 * items)
        return final


def run_training(
    train: RatingDataset,
    config: TrainConfig,
    scaler: Optional[RatingScaler] = None,
    model_config: Optional[GDiTConfig] = None,
    schedule: Optional[NoiseSchedule] = None,
    features: Optional[FeatureTable] = None,
    out_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
    run_info: Optional[dict] = None,
) -> Checkpoint:
    """
    Train a denoiser on the training split of a dataset.

    Args:
        train: Training ratings
        config: Training configuration
        scaler: Rating scaler; fitted linearly on ``train`` if omitted
        model_config: Architecture; defaults sized to the features
        schedule: Noise schedule; linear 1000 steps if omitted
        features: Features; built with ``featurize`` if omitted
        out_dir: Where checkpoints and ``loss.csv`` go
        progress: Show a progress bar
        run_info: Extra entries recorded in checkpoints (dataset, split)

    Returns:
        The final checkpoint
    """
    scaler = scaler or RatingScaler.fit(train.rating_scale, train.ratings(), TransformMode.LINEAR)
    features = features if features is not None else featurize(train)
    matrix = build_matrix(train, scaler)
    trainer = Trainer(
        matrix, features, config, scaler,
        model_config=model_config, schedule=schedule, run_info=run_info,
    )
    return trainer.run(out_dir=out_dir, progress=progress)
