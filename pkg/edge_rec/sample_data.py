"""Toy datasets for tests and demos."""

from typing import Optional

import numpy as np

from .density import density_score
from .ingest import build_matrix
from .records import DatasetKind, RatingDataset, RatingRecord
from .xform import RatingScaler

FIXTURE_USERS = ["342", "254", "436", "974"]
FIXTURE_ITEMS = ["TGM", "TTN", "AVG"]


def create_fixture_dataset() -> RatingDataset:
    """
    Four users and three movies with half-star ratings.

    Returns:
        The interaction graph, with MovieLens-style user and item attributes
    """
    ratings = [
        # (user, item, rating)
        ("342", "TGM", 5.0),
        ("342", "TTN", 2.5),
        ("342", "AVG", 3.0),
        ("254", "TTN", 1.0),
        ("254", "AVG", 4.0),
        ("436", "AVG", 4.5),
        ("974", "TGM", 1.5),
        ("974", "AVG", 3.5),
    ]
    records = [
        RatingRecord(FIXTURE_USERS.index(u), FIXTURE_ITEMS.index(i), r, 1_000_000 + n)
        for n, (u, i, r) in enumerate(ratings)
    ]
    user_attrs = {
        0: {"age": "31", "gender": "F", "occupation": "engineer"},
        1: {"age": "24", "gender": "M", "occupation": "student"},
        2: {"age": "45", "gender": "F", "occupation": "writer"},
        3: {"age": "52", "gender": "M", "occupation": "retired"},
    }
    item_attrs = {
        0: {"title": "The Godfather", "year": "1972", "genres": "Crime|Drama"},
        1: {"title": "Titanic", "year": "1997", "genres": "Drama|Romance"},
        2: {"title": "The Avengers", "year": "2012", "genres": "Action|Sci-Fi"},
    }
    return RatingDataset(
        records=records,
        num_users=len(FIXTURE_USERS),
        num_items=len(FIXTURE_ITEMS),
        user_attrs=user_attrs,
        item_attrs=item_attrs,
        rating_scale=(1.0, 5.0),
        user_ids=list(FIXTURE_USERS),
        item_ids=list(FIXTURE_ITEMS),
        kind=DatasetKind.FIXTURE,
    )


def make_rank_one_dataset(
    num_users: int = 20,
    num_items: int = 20,
    seed: int = 0,
    levels: int = 5,
) -> RatingDataset:
    """
    Fully observed ratings from an outer product of random affinities.

    User and item affinities are uniform on [-1, 1]; their products are
    quantized into ``levels`` equally populated bins, giving ratings 1..levels.
    Each user and item carries its affinity as a numeric attribute, and
    timestamps are a random permutation so a time split holds out random cells.
    """
    rng = np.random.default_rng(seed)
    user_affinity = rng.uniform(-1.0, 1.0, size=num_users)
    item_affinity = rng.uniform(-1.0, 1.0, size=num_items)
    scores = np.outer(user_affinity, item_affinity)
    edges = np.quantile(scores, np.linspace(0.0, 1.0, levels + 1)[1:-1])
    ratings = np.digitize(scores, edges) + 1
    timestamps = rng.permutation(num_users * num_items)

    records = [
        RatingRecord(u, i, float(ratings[u, i]), int(timestamps[u * num_items + i]))
        for u in range(num_users)
        for i in range(num_items)
    ]
    return RatingDataset(
        records=records,
        num_users=num_users,
        num_items=num_items,
        user_attrs={u: {"affinity": repr(float(a))} for u, a in enumerate(user_affinity)},
        item_attrs={i: {"affinity": repr(float(a))} for i, a in enumerate(item_affinity)},
        rating_scale=(1.0, float(levels)),
        kind=DatasetKind.SYNTHETIC,
    )


def print_full_matrix(dataset: RatingDataset, scaler: Optional[RatingScaler] = None) -> None:
    """Print the rating matrix with --- for missing cells, then the density scores."""
    grid = {r.key: r.rating for r in dataset.records}
    width = max(6, *(len(i) for i in dataset.item_ids))

    print("\n" + "=" * 50)
    print(f"INTERACTIONS - {len(dataset)} ratings, {dataset.num_users} users, {dataset.num_items} items")
    print("=" * 50)
    print(f"{'user':>8} | " + " ".join(f"{i:>{width}}" for i in dataset.item_ids))
    print("-" * (11 + (width + 1) * dataset.num_items))
    for u, user_id in enumerate(dataset.user_ids):
        cells = [
            f"{grid[(u, i)]:>{width}.1f}" if (u, i) in grid else f"{'---':>{width}}"
            for i in range(dataset.num_items)
        ]
        print(f"{user_id:>8} | " + " ".join(cells))

    user_scores, item_scores = density_score(build_matrix(dataset, scaler or RatingScaler(*dataset.rating_scale)))
    print("\nDensity scores (nodes two hops away):")
    print("  users: " + ", ".join(f"{u}={s}" for u, s in zip(dataset.user_ids, user_scores)))
    print("  items: " + ", ".join(f"{i}={s}" for i, s in zip(dataset.item_ids, item_scores)))
    print("=" * 50 + "\n")
