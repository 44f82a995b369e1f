"""Maps between raw ratings and the diffusion value space."""

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy.stats import norm
from sortedcontainers import SortedDict

from .errors import DegenerateDistributionError, RatingRangeError


class TransformMode(Enum):
    """How ratings are mapped into diffusion space."""
    LINEAR = "linear"
    QUANTILE = "quantile"


class QuantileMap:
    """
    Midpoint-rank empirical CDF of discrete rating levels, pushed through the probit.

    Level ``r`` with count ``c`` and cumulative count ``C`` (including itself)
    out of ``N`` ratings gets rank ``(C - c/2) / N`` and Gaussian value
    ``probit(rank)``. Inversion snaps to the level with the nearest Gaussian value.
    """

    def __init__(self, levels: Iterable[float], midpoint_ranks: Iterable[float]):
        self.levels = np.asarray(list(levels), dtype=np.float64)
        self.midpoint_ranks = np.asarray(list(midpoint_ranks), dtype=np.float64)
        if len(self.levels) != len(self.midpoint_ranks):
            raise ValueError("levels and midpoint_ranks must have equal length")
        if len(self.levels) < 2:
            raise DegenerateDistributionError(
                f"Quantile map needs at least 2 distinct levels, got {len(self.levels)}"
            )
        if np.any(np.diff(self.levels) <= 0):
            raise ValueError("Levels must be sorted and distinct")
        ranks = self.midpoint_ranks
        if np.any(np.diff(ranks) <= 0) or ranks[0] <= 0 or ranks[-1] >= 1:
            raise ValueError("Midpoint ranks must be strictly increasing in (0, 1)")
        self.gaussian_values = norm.ppf(ranks)
        # gaussian value -> level, for nearest-value inversion
        self._by_gaussian = SortedDict(zip(self.gaussian_values.tolist(), self.levels.tolist()))

    def apply(self, r):
        r = np.asarray(r, dtype=np.float64)
        idx = np.searchsorted(self.levels, r)
        idx = np.clip(idx, 0, len(self.levels) - 1)
        if np.any(self.levels[idx] != r):
            missing = np.unique(r[self.levels[idx] != r] if r.ndim else r)
            raise RatingRangeError(f"Ratings {missing.tolist()} are not fitted levels")
        out = self.gaussian_values[idx]
        return float(out) if out.ndim == 0 else out

    def invert_scalar(self, z: float) -> float:
        keys = self._by_gaussian.keys()
        pos = self._by_gaussian.bisect_left(z)
        if pos == 0:
            return self._by_gaussian[keys[0]]
        if pos == len(keys):
            return self._by_gaussian[keys[-1]]
        lower, upper = keys[pos - 1], keys[pos]
        # ties go to the lower level
        nearest = lower if z - lower <= upper - z else upper
        return self._by_gaussian[nearest]

    def invert(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 0:
            return self.invert_scalar(float(z))
        return np.vectorize(self.invert_scalar, otypes=[np.float64])(z)

    @property
    def bounds(self) -> Tuple[float, float]:
        return float(self.gaussian_values[0]), float(self.gaussian_values[-1])

    def to_dict(self) -> dict:
        return {"levels": self.levels.tolist(), "midpoint_ranks": self.midpoint_ranks.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "QuantileMap":
        return cls(data["levels"], data["midpoint_ranks"])

    def __repr__(self) -> str:
        pairs = ", ".join(
            f"{lvl:g}->{g:+.4f}" for lvl, g in zip(self.levels, self.gaussian_values)
        )
        return f"QuantileMap({pairs})"


def fit_quantile(train_ratings: Iterable[float]) -> QuantileMap:
    """
    Fit a quantile map to training ratings.

    Args:
        train_ratings: Observed ratings

    Returns:
        The fitted map

    Raises:
        DegenerateDistributionError: If fewer than two distinct levels occur
    """
    ratings = np.asarray(list(train_ratings), dtype=np.float64)
    levels, counts = np.unique(ratings, return_counts=True)
    if len(levels) < 2:
        raise DegenerateDistributionError(
            f"Quantile map needs at least 2 distinct levels, got {levels.tolist()}"
        )
    cumulative = np.cumsum(counts)
    ranks = (cumulative - counts / 2.0) / len(ratings)
    return QuantileMap(levels, ranks)


@dataclass(frozen=True)
class RatingScaler:
    """
    Rating <-> diffusion-space map.

    Linear mode maps ``[r_min, r_max]`` onto ``[-1, 1]`` with the scale midpoint
    at 0 (neutral). Quantile mode maps each fitted level to its Gaussian value.

    Attributes:
        r_min: Lowest rating
        r_max: Highest rating
        mode: LINEAR or QUANTILE
        quantile_map: Required for QUANTILE mode
    """
    r_min: float = 1.0
    r_max: float = 5.0
    mode: TransformMode = TransformMode.LINEAR
    quantile_map: Optional[QuantileMap] = None

    def __post_init__(self):
        if not self.r_min < self.r_max:
            raise ValueError(f"r_min must be below r_max, got {self.r_min}, {self.r_max}")
        if self.mode == TransformMode.QUANTILE and self.quantile_map is None:
            raise ValueError("Quantile mode needs a fitted quantile map")

    @classmethod
    def fit(
        cls,
        rating_scale: Tuple[float, float],
        train_ratings: Iterable[float],
        mode: TransformMode = TransformMode.LINEAR,
    ) -> "RatingScaler":
        qmap = fit_quantile(train_ratings) if mode == TransformMode.QUANTILE else None
        return cls(float(rating_scale[0]), float(rating_scale[1]), mode, qmap)

    @property
    def bounds(self) -> Tuple[float, float]:
        """Range of the diffusion values this scaler produces."""
        if self.mode == TransformMode.QUANTILE:
            return self.quantile_map.bounds
        return (-1.0, 1.0)

    def scale(self, r):
        return scale_rating(r, self)

    def unscale(self, w, snap: bool = False):
        return unscale_rating(w, self, snap=snap)

    def to_dict(self) -> dict:
        return {
            "r_min": self.r_min,
            "r_max": self.r_max,
            "mode": self.mode.value,
            "quantile_map": self.quantile_map.to_dict() if self.quantile_map else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RatingScaler":
        qmap = data.get("quantile_map")
        return cls(
            r_min=data["r_min"],
            r_max=data["r_max"],
            mode=TransformMode(data["mode"]),
            quantile_map=QuantileMap.from_dict(qmap) if qmap else None,
        )


def scale_rating(r, scaler: RatingScaler):
    """
    Map ratings into diffusion space.

    Raises:
        RatingRangeError: If a rating lies outside ``[r_min, r_max]`` (or is not a
            fitted level in quantile mode)
    """
    arr = np.asarray(r, dtype=np.float64)
    if np.any(arr < scaler.r_min) or np.any(arr > scaler.r_max):
        raise RatingRangeError(
            f"Rating outside scale [{scaler.r_min}, {scaler.r_max}]: {r}"
        )
    if scaler.mode == TransformMode.QUANTILE:
        return quantile_apply(arr, scaler.quantile_map)
    w = 2.0 * (arr - scaler.r_min) / (scaler.r_max - scaler.r_min) - 1.0
    return float(w) if w.ndim == 0 else w


def unscale_rating(w, scaler: RatingScaler, snap: bool = False):
    """
    Map diffusion values back to the rating scale.

    Values are clamped to the scaler's bounds first, since sampling can overshoot.

    Args:
        w: Diffusion-space values
        scaler: The scaler used for training
        snap: Round to the nearest whole rating level (linear mode)
    """
    arr = np.clip(np.asarray(w, dtype=np.float64), *scaler.bounds)
    if scaler.mode == TransformMode.QUANTILE:
        return quantile_invert(arr, scaler.quantile_map)
    r = (arr + 1.0) * (scaler.r_max - scaler.r_min) / 2.0 + scaler.r_min
    if snap:
        r = np.clip(np.round(r), scaler.r_min, scaler.r_max)
    return float(r) if r.ndim == 0 else r


def quantile_apply(r, qmap: QuantileMap):
    """Look up the Gaussian value of fitted rating levels."""
    return qmap.apply(r)


def quantile_invert(z, qmap: QuantileMap):
    """Snap Gaussian values to the fitted level with the nearest Gaussian value."""
    return qmap.invert(z)
