"""Two-hop density scoring, density sorting and patch sampling."""

import logging
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import DensityInfeasibleError
from .matrix import InteractionMatrix, Patch

logger = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 1000


def _two_hop_counts(adjacency: sp.csr_matrix) -> np.ndarray:
    """Distinct same-side nodes reachable in exactly two hops, per row node."""
    co = (adjacency @ adjacency.T).tocsr()
    co.setdiag(0)
    co.eliminate_zeros()
    return np.diff(co.indptr).astype(np.int64)


def density_score(matrix: InteractionMatrix) -> Tuple[np.ndarray, np.ndarray]:
    """
    Score each user and item by the number of nodes at a distance of 2 edges.

    A user's score is the number of other users sharing at least one known
    item with it; items are scored symmetrically.

    Returns:
        (user_scores, item_scores) aligned with the matrix rows and columns
    """
    adjacency = sp.csr_matrix(matrix.known.astype(np.int64))
    return _two_hop_counts(adjacency), _two_hop_counts(adjacency.T.tocsr())


def density_sort(matrix: InteractionMatrix) -> InteractionMatrix:
    """
    Permute rows and columns by descending density score.

    The sort is stable (ties keep original order), so the densest users and
    items end up in the top-left corner. The returned id maps record the
    original identity of every row and column.
    """
    user_scores, item_scores = density_score(matrix)
    row_order = np.argsort(-user_scores, kind="stable")
    col_order = np.argsort(-item_scores, kind="stable")
    return matrix.permuted(row_order, col_order)


def corner_densities(matrix: InteractionMatrix) -> np.ndarray:
    """Known-cell fraction of every k x k top-left corner, k = 1..min(rows, cols)."""
    size = min(matrix.shape)
    if size == 0:
        return np.zeros(0)
    prefix = matrix.known[:size, :size].astype(np.int64).cumsum(0).cumsum(1)
    ks = np.arange(1, size + 1)
    return prefix[ks - 1, ks - 1] / (ks * ks)


def dense_region(sorted_matrix: InteractionMatrix, label_density: float) -> int:
    """
    Side length of the dense corner for a label density.

    Scans top-left square corners of a density-sorted matrix and returns the
    largest side whose known-cell fraction is at least ``label_density``.

    Raises:
        DensityInfeasibleError: If no corner reaches the density
    """
    densities = corner_densities(sorted_matrix)
    feasible = np.flatnonzero(densities >= label_density)
    if len(feasible) == 0:
        best = float(densities.max()) if len(densities) else 0.0
        raise DensityInfeasibleError(f"No corner reaches label density {label_density}", best)
    side = int(feasible[-1]) + 1
    logger.info(
        "Dense corner for label density %.2f: %dx%d (density %.4f)",
        label_density, side, side, densities[side - 1],
    )
    return side


def sample_patch(
    matrix: InteractionMatrix,
    n: int,
    m: int,
    min_density: float,
    rng: np.random.Generator,
    region: Optional[Tuple[int, int]] = None,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> Patch:
    """
    Draw a random n x m patch whose known-cell fraction is at least ``min_density``.

    Args:
        matrix: Matrix to sample from
        n: Number of users (rows)
        m: Number of items (columns)
        min_density: Required known-cell fraction in [0, 1]
        rng: Random generator; the same seed gives the same patch
        region: Restrict sampling to the top-left (rows, cols) corner
        max_retries: Rejection-sampling cap

    Returns:
        The accepted patch, with row and column positions sorted ascending

    Raises:
        ValueError: If the patch does not fit the region
        DensityInfeasibleError: If the retry cap is exhausted
    """
    rows, cols = region if region is not None else matrix.shape
    rows, cols = min(rows, matrix.shape[0]), min(cols, matrix.shape[1])
    if not 1 <= n <= rows or not 1 <= m <= cols:
        raise ValueError(f"Patch {n}x{m} does not fit the {rows}x{cols} sampling region")
    if not 0.0 <= min_density <= 1.0:
        raise ValueError(f"min_density must be in [0, 1], got {min_density}")

    best = 0.0
    for _ in range(max_retries):
        user_rows = np.sort(rng.choice(rows, size=n, replace=False))
        item_cols = np.sort(rng.choice(cols, size=m, replace=False))
        density = float(matrix.known[np.ix_(user_rows, item_cols)].mean())
        if density >= min_density:
            return Patch.from_matrix(matrix, user_rows, item_cols)
        best = max(best, density)

    raise DensityInfeasibleError(
        f"No {n}x{m} patch with density >= {min_density} after {max_retries} draws", best
    )
