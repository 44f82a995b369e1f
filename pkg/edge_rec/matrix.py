"""Weighted interaction matrices, patches and feature tables."""

from dataclasses import dataclass, field
from typing import List

import numpy as np


@dataclass
class InteractionMatrix:
    """
    Dense users x items array of scaled interaction strengths.

    Cells without a known interaction hold exactly 0.0 (neutral) and have
    ``known`` False. Rows and columns may be permuted (see ``density_sort``);
    ``row_ids`` / ``col_ids`` map each position back to its dataset index.

    Attributes:
        values: (num_rows, num_cols) float64 array
        known: Boolean mask of the same shape
        row_ids: Dataset user index of each row
        col_ids: Dataset item index of each column
    """
    values: np.ndarray
    known: np.ndarray
    row_ids: np.ndarray = None
    col_ids: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.known = np.asarray(self.known, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.known.shape:
            raise ValueError(
                f"values {self.values.shape} and known {self.known.shape} must be equal 2D shapes"
            )
        if self.row_ids is None:
            self.row_ids = np.arange(self.values.shape[0])
        if self.col_ids is None:
            self.col_ids = np.arange(self.values.shape[1])
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        self.col_ids = np.asarray(self.col_ids, dtype=np.int64)
        if len(self.row_ids) != self.values.shape[0] or len(self.col_ids) != self.values.shape[1]:
            raise ValueError("Id maps must match matrix dimensions")
        if np.any(self.values[~self.known] != 0.0):
            raise ValueError("Unknown cells must hold exactly 0.0")

    @property
    def shape(self):
        return self.values.shape

    @property
    def density(self) -> float:
        """Fraction of cells with a known interaction."""
        if self.known.size == 0:
            return 0.0
        return float(self.known.mean())

    def permuted(self, row_order: np.ndarray, col_order: np.ndarray) -> "InteractionMatrix":
        """Return the matrix with rows and columns reordered."""
        return InteractionMatrix(
            values=self.values[np.ix_(row_order, col_order)],
            known=self.known[np.ix_(row_order, col_order)],
            row_ids=self.row_ids[row_order],
            col_ids=self.col_ids[col_order],
        )

    def __repr__(self) -> str:
        rows, cols = self.shape
        return f"InteractionMatrix({rows}x{cols}, density={self.density:.4f})"


@dataclass(frozen=True)
class Patch:
    """
    An n x m sub-matrix of an interaction matrix.

    Attributes:
        values: (n, m) scaled values
        known: (n, m) mask
        user_rows: Row positions in the parent matrix
        item_cols: Column positions in the parent matrix
    """
    values: np.ndarray
    known: np.ndarray
    user_rows: np.ndarray
    item_cols: np.ndarray

    def __post_init__(self):
        n, m = len(self.user_rows), len(self.item_cols)
        if n < 1 or m < 1:
            raise ValueError(f"Patch dimensions must be at least 1x1, got {n}x{m}")
        if len(set(self.user_rows.tolist())) != n or len(set(self.item_cols.tolist())) != m:
            raise ValueError("Patch index lists must be duplicate-free")
        if self.values.shape != (n, m) or self.known.shape != (n, m):
            raise ValueError(f"Patch arrays must have shape ({n}, {m})")

    @classmethod
    def from_matrix(
        cls, matrix: InteractionMatrix, user_rows: np.ndarray, item_cols: np.ndarray
    ) -> "Patch":
        user_rows = np.asarray(user_rows, dtype=np.int64)
        item_cols = np.asarray(item_cols, dtype=np.int64)
        grid = np.ix_(user_rows, item_cols)
        return cls(
            values=matrix.values[grid].copy(),
            known=matrix.known[grid].copy(),
            user_rows=user_rows,
            item_cols=item_cols,
        )

    @property
    def n(self) -> int:
        return len(self.user_rows)

    @property
    def m(self) -> int:
        return len(self.item_cols)

    @property
    def density(self) -> float:
        return float(self.known.mean())

    def __repr__(self) -> str:
        return f"Patch({self.n}x{self.m}, density={self.density:.4f})"


@dataclass
class FeatureTable:
    """
    Real-valued user and item feature rows.

    Attributes:
        user_features: (num_users, d_u) array
        item_features: (num_items, d_i) array
        user_columns: Meaning of each user feature column
        item_columns: Meaning of each item feature column
    """
    user_features: np.ndarray
    item_features: np.ndarray
    user_columns: List[str] = field(default_factory=list)
    item_columns: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.user_features = np.asarray(self.user_features, dtype=np.float64)
        self.item_features = np.asarray(self.item_features, dtype=np.float64)
        if self.user_features.ndim != 2 or self.item_features.ndim != 2:
            raise ValueError("Feature tables must be 2D")
        if not (np.all(np.isfinite(self.user_features)) and np.all(np.isfinite(self.item_features))):
            raise ValueError("Feature tables must not contain non-finite entries")

    @property
    def d_user(self) -> int:
        return self.user_features.shape[1]

    @property
    def d_item(self) -> int:
        return self.item_features.shape[1]

    def for_patch(self, matrix: InteractionMatrix, patch: Patch):
        """Feature rows aligned with a patch of ``matrix``."""
        users = matrix.row_ids[patch.user_rows]
        items = matrix.col_ids[patch.item_cols]
        return self.user_features[users], self.item_features[items]

    @property
    def encodings(self) -> dict:
        return {"user": list(self.user_columns), "item": list(self.item_columns)}
