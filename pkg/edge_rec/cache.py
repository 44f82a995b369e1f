"""Cached dataset files, so later stages skip re-parsing MovieLens text."""

import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .blob import read_blob, write_blob
from .matrix import FeatureTable, InteractionMatrix
from .records import DatasetKind, RatingDataset, RatingRecord

logger = logging.getLogger(__name__)

CACHE_KIND = "dataset"


def save_dataset_cache(
    path: Union[str, Path],
    dataset: RatingDataset,
    features: FeatureTable,
    matrix: Optional[InteractionMatrix] = None,
) -> None:
    """
    Write a dataset, its features and optionally a built matrix.

    The JSON manifest holds counts, rating scale, id maps, raw attributes and
    feature column documentation; records, features and matrix are stored as
    little-endian arrays.
    """
    records = dataset.records
    arrays = {
        "records.user": np.array([r.user_id for r in records], dtype=np.int64),
        "records.item": np.array([r.item_id for r in records], dtype=np.int64),
        "records.rating": np.array([r.rating for r in records], dtype=np.float64),
        "records.timestamp": np.array([r.timestamp for r in records], dtype=np.int64),
        "features.user": features.user_features,
        "features.item": features.item_features,
    }
    if matrix is not None:
        arrays.update({
            "matrix.values": matrix.values,
            "matrix.known": matrix.known,
            "matrix.row_ids": matrix.row_ids,
            "matrix.col_ids": matrix.col_ids,
        })
    meta = {
        "kind": dataset.kind.value,
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "num_records": len(records),
        "rating_scale": list(dataset.rating_scale),
        "user_ids": dataset.user_ids,
        "item_ids": dataset.item_ids,
        "user_attrs": {str(k): v for k, v in dataset.user_attrs.items()},
        "item_attrs": {str(k): v for k, v in dataset.item_attrs.items()},
        "feature_columns": features.encodings,
    }
    write_blob(path, CACHE_KIND, meta, arrays)
    logger.info("Wrote dataset cache %s (%d records)", path, len(records))


def load_dataset_cache(
    path: Union[str, Path],
) -> Tuple[RatingDataset, FeatureTable, Optional[InteractionMatrix]]:
    """Read a file written by ``save_dataset_cache``."""
    meta, arrays = read_blob(path, CACHE_KIND)
    records = [
        RatingRecord(int(u), int(i), float(r), int(t))
        for u, i, r, t in zip(
            arrays["records.user"], arrays["records.item"],
            arrays["records.rating"], arrays["records.timestamp"],
        )
    ]
    dataset = RatingDataset(
        records=records,
        num_users=meta["num_users"],
        num_items=meta["num_items"],
        user_attrs={int(k): v for k, v in meta["user_attrs"].items()},
        item_attrs={int(k): v for k, v in meta["item_attrs"].items()},
        rating_scale=tuple(meta["rating_scale"]),
        user_ids=meta["user_ids"],
        item_ids=meta["item_ids"],
        kind=DatasetKind(meta["kind"]),
    )
    columns = meta["feature_columns"]
    features = FeatureTable(
        arrays["features.user"], arrays["features.item"], columns["user"], columns["item"]
    )
    matrix = None
    if "matrix.values" in arrays:
        matrix = InteractionMatrix(
            arrays["matrix.values"], arrays["matrix.known"],
            arrays["matrix.row_ids"], arrays["matrix.col_ids"],
        )
    return dataset, features, matrix
