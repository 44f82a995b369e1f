"""Exception types for edge-rec.

Every error is a ``ValueError`` so callers that only care about "bad input"
can catch one type; the subclasses carry the detail each stage reports.
"""

from typing import Optional, Sequence


class EdgeRecError(ValueError):
    """Base class for all edge-rec errors."""


class ParseError(EdgeRecError):
    """A data file line could not be parsed."""

    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}: line {line_number}: {reason}")


class IntegrityError(EdgeRecError):
    """Records reference ids or values outside the dataset's declared range."""


class RatingRangeError(EdgeRecError):
    """A rating lies outside the scaler's rating scale."""


class DegenerateDistributionError(EdgeRecError):
    """A quantile map cannot be fitted to fewer than two distinct levels."""


class DensityInfeasibleError(EdgeRecError):
    """No patch meeting the requested density was found within the retry cap."""

    def __init__(self, message: str, best_density: float):
        self.best_density = best_density
        super().__init__(f"{message} (best density found: {best_density:.4f})")


class NonFiniteError(EdgeRecError):
    """A forward pass produced NaN or infinity."""


class TrainingDivergedError(EdgeRecError):
    """The training loss became non-finite."""

    def __init__(self, iteration: int, t_values: Sequence[int]):
        self.iteration = iteration
        self.t_values = list(t_values)
        super().__init__(
            f"Non-finite loss at iteration {iteration} (t values: {self.t_values})"
        )


class CheckpointError(EdgeRecError):
    """A checkpoint or cache file is malformed."""

    def __init__(self, message: str, tensor_name: Optional[str] = None):
        self.tensor_name = tensor_name
        if tensor_name is not None:
            message = f"{message} (tensor '{tensor_name}')"
        super().__init__(message)


class ConfigMismatchError(EdgeRecError):
    """A checkpoint's model configuration differs from the one requested."""


class NoEvaluableUsersError(EdgeRecError):
    """Evaluation found no user with a relevant held-out item."""


class UsageError(EdgeRecError):
    """Bad command-line usage."""
