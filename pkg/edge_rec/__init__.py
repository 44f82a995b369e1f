"""Diffusion over user-item interaction matrices for top-K recommendation."""

from .records import DatasetKind, RatingRecord, RatingDataset
from .matrix import InteractionMatrix, Patch, FeatureTable
from .xform import RatingScaler, TransformMode
from .diffusion import NoiseSchedule, make_linear_schedule
from .gdit import GDiTConfig, GDiTModel
from .guard import ModelGuard
from .train import TrainConfig, Trainer
from .sample import DiffusionSampler, SampleConfig
from .evaluate import EvalConfig, EvalReport

__all__ = [
    "DatasetKind", "RatingRecord", "RatingDataset",
    "InteractionMatrix", "Patch", "FeatureTable",
    "RatingScaler", "TransformMode",
    "NoiseSchedule", "make_linear_schedule",
    "GDiTConfig", "GDiTModel", "ModelGuard",
    "TrainConfig", "Trainer",
    "DiffusionSampler", "SampleConfig",
    "EvalConfig", "EvalReport",
]
