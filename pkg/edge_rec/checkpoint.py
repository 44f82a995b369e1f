"""Model checkpoints.

A checkpoint is a ``blob`` container whose header carries the model config,
noise schedule, rating scaler, iteration and generator state, and whose
payload holds every named parameter tensor bit for bit.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch

from .blob import read_blob, write_blob
from .diffusion import NoiseSchedule
from .errors import CheckpointError, ConfigMismatchError
from .gdit import GDiTConfig, GDiTModel
from .xform import RatingScaler

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
SUFFIX = ".ckpt"


@dataclass
class Checkpoint:
    """
    Everything needed to resume training or to sample.

    Attributes:
        parameters: Parameter name -> array, one entry per model parameter
        model_config: Architecture of the parameters
        schedule: Noise schedule the model was trained with
        scaler: Rating scaler used to build the training matrix
        iteration: Completed training iterations
        rng_state: Generator state (numpy bit-generator dict and torch state bytes)
        train_config: Training configuration, for the run record
    """
    parameters: Dict[str, np.ndarray]
    model_config: GDiTConfig
    schedule: NoiseSchedule
    scaler: RatingScaler
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: GDiTModel, schedule: NoiseSchedule, scaler: RatingScaler, **kwargs) -> "Checkpoint":
        parameters = {
            name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()
        }
        return cls(parameters, model.config, schedule, scaler, **kwargs)

    @property
    def dtype(self) -> torch.dtype:
        """Precision the parameters were stored in."""
        first = next(iter(self.parameters.values()))
        return torch.from_numpy(first.reshape(-1)[:1].copy()).dtype

    def build_model(self, dtype: Optional[torch.dtype] = None) -> GDiTModel:
        """Instantiate a model and load the stored parameters (in their own precision unless ``dtype`` is given)."""
        model = GDiTModel(self.model_config).to(self.dtype)
        self.load_into(model)
        if dtype is not None:
            model = model.to(dtype)
        return model

    def load_into(self, model: GDiTModel) -> None:
        if model.config != self.model_config:
            raise ConfigMismatchError(
                f"Checkpoint config {self.model_config} does not match model config {model.config}"
            )
        names = {name for name, _ in model.named_parameters()}
        if names != set(self.parameters):
            raise CheckpointError(
                f"Parameter names differ: missing {sorted(names - set(self.parameters))}, "
                f"unexpected {sorted(set(self.parameters) - names)}"
            )
        with torch.no_grad():
            for name, p in model.named_parameters():
                value = torch.from_numpy(self.parameters[name].copy())
                if tuple(value.shape) != tuple(p.shape):
                    raise CheckpointError(f"Shape {tuple(value.shape)} != {tuple(p.shape)}", name)
                p.data = value.to(p.dtype) if value.dtype != p.dtype else value


def resolve_path(path: Union[str, Path]) -> Path:
    """Accept a checkpoint path with or without its suffix."""
    path = Path(path)
    if not path.exists() and path.suffix != SUFFIX:
        return path.with_name(path.name + SUFFIX)
    return path


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write ``ckpt`` and return the written path."""
    path = Path(path)
    if path.suffix != SUFFIX:
        path = path.with_name(path.name + SUFFIX)
    arrays = {f"param.{name}": value for name, value in ckpt.parameters.items()}
    torch_state = ckpt.rng_state.get("torch")
    if torch_state is not None:
        arrays["rng.torch"] = np.asarray(torch_state, dtype=np.uint8)
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "schedule": ckpt.schedule.to_dict(),
        "scaler": ckpt.scaler.to_dict(),
        "iteration": ckpt.iteration,
        "rng_numpy": ckpt.rng_state.get("numpy"),
        "train_config": ckpt.train_config,
    }
    write_blob(path, CHECKPOINT_KIND, meta, arrays)
    logger.info("Saved checkpoint %s (iteration %d)", path, ckpt.iteration)
    return path


def load_checkpoint(path: Union[str, Path], expected_config: Optional[GDiTConfig] = None) -> Checkpoint:
    """
    Read a checkpoint.

    Args:
        path: Checkpoint file (suffix optional)
        expected_config: If given, the stored config must equal it

    Raises:
        CheckpointError: On a malformed or truncated file, or a header missing a field
        ConfigMismatchError: If the stored config differs from ``expected_config``
    """
    path = resolve_path(path)
    meta, arrays = read_blob(path, CHECKPOINT_KIND)
    try:
        config = GDiTConfig.from_dict(meta["model_config"])
        schedule = NoiseSchedule.from_dict(meta["schedule"])
        scaler = RatingScaler.from_dict(meta["scaler"])
        iteration = int(meta["iteration"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint header ({type(e).__name__}: {e})") from e
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(
            f"Checkpoint was trained with {config}, but {expected_config} was requested"
        )
    parameters = {
        name[len("param."):]: value for name, value in arrays.items() if name.startswith("param.")
    }
    rng_state = {"numpy": meta.get("rng_numpy")}
    if "rng.torch" in arrays:
        rng_state["torch"] = arrays["rng.torch"]
    return Checkpoint(
        parameters=parameters,
        model_config=config,
        schedule=schedule,
        scaler=scaler,
        iteration=iteration,
        rng_state=rng_state,
        train_config=meta.get("train_config", {}),
    )
