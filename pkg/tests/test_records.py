"""Tests for rating records, datasets, matrices and patches."""

import numpy as np
import pytest

from edge_rec.errors import IntegrityError
from edge_rec.matrix import FeatureTable, InteractionMatrix, Patch
from edge_rec.records import DatasetKind, RatingDataset, RatingRecord


def _records():
    return [
        RatingRecord(0, 0, 5.0, 10),
        RatingRecord(0, 1, 3.0, 11),
        RatingRecord(1, 1, 1.0, 12),
    ]


class TestRatingRecord:
    def test_create_record(self):
        record = RatingRecord(user_id=3, item_id=7, rating=4.5, timestamp=100)
        assert record.key == (3, 7)
        assert record.rating == 4.5

    def test_negative_ids_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            RatingRecord(-1, 0, 3.0, 0)


class TestRatingDataset:
    def test_create_dataset(self):
        dataset = RatingDataset(_records(), num_users=2, num_items=2)
        assert len(dataset) == 3
        assert dataset.user_ids == ["0", "1"]
        assert dataset.ratings() == [5.0, 3.0, 1.0]
        assert dataset.kind == DatasetKind.ML_100K

    def test_duplicate_pair_rejected(self):
        records = _records() + [RatingRecord(0, 0, 2.0, 20)]
        with pytest.raises(IntegrityError, match="Duplicate rating"):
            RatingDataset(records, num_users=2, num_items=2)

    def test_id_outside_counts_rejected(self):
        with pytest.raises(IntegrityError, match="outside the declared counts"):
            RatingDataset(_records(), num_users=1, num_items=2)

    def test_rating_outside_scale_rejected(self):
        records = [RatingRecord(0, 0, 6.0, 0)]
        with pytest.raises(IntegrityError, match="outside rating scale"):
            RatingDataset(records, num_users=1, num_items=1)

    def test_id_maps_must_match_counts(self):
        with pytest.raises(IntegrityError, match="Id maps"):
            RatingDataset(_records(), num_users=2, num_items=2, user_ids=["a"])

    def test_with_records_keeps_metadata(self):
        dataset = RatingDataset(
            _records(), num_users=2, num_items=2, item_attrs={0: {"year": "1999"}}
        )
        subset = dataset.with_records(_records()[:1])
        assert len(subset) == 1
        assert subset.item_attrs == dataset.item_attrs
        assert subset.num_items == 2
        assert len(dataset) == 3


class TestInteractionMatrix:
    def test_density(self):
        known = np.array([[True, False], [True, True]])
        values = np.where(known, 0.5, 0.0)
        matrix = InteractionMatrix(values, known)
        assert matrix.density == 0.75
        assert matrix.row_ids.tolist() == [0, 1]

    def test_unknown_cells_must_be_zero(self):
        with pytest.raises(ValueError, match="exactly 0.0"):
            InteractionMatrix(np.ones((2, 2)), np.eye(2, dtype=bool))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="equal 2D shapes"):
            InteractionMatrix(np.zeros((2, 3)), np.zeros((3, 2), dtype=bool))

    def test_permuted_tracks_ids(self):
        values = np.arange(6, dtype=float).reshape(2, 3)
        matrix = InteractionMatrix(values, np.ones((2, 3), dtype=bool))
        permuted = matrix.permuted(np.array([1, 0]), np.array([2, 0, 1]))
        assert permuted.values.tolist() == [[5.0, 3.0, 4.0], [2.0, 0.0, 1.0]]
        assert permuted.row_ids.tolist() == [1, 0]
        assert permuted.col_ids.tolist() == [2, 0, 1]


class TestPatch:
    def setup_method(self):
        values = np.arange(12, dtype=float).reshape(3, 4)
        known = np.ones((3, 4), dtype=bool)
        self.matrix = InteractionMatrix(values, known)

    def test_from_matrix(self):
        patch = Patch.from_matrix(self.matrix, [0, 2], [1, 3])
        assert patch.values.tolist() == [[1.0, 3.0], [9.0, 11.0]]
        assert (patch.n, patch.m) == (2, 2)
        assert patch.density == 1.0

    def test_patch_is_a_copy(self):
        patch = Patch.from_matrix(self.matrix, [0], [0])
        patch.values[0, 0] = 99.0
        assert self.matrix.values[0, 0] == 0.0

    def test_duplicate_rows_rejected(self):
        with pytest.raises(ValueError, match="duplicate-free"):
            Patch.from_matrix(self.matrix, [1, 1], [0])

    def test_empty_patch_rejected(self):
        with pytest.raises(ValueError, match="at least 1x1"):
            Patch.from_matrix(self.matrix, [], [0])


class TestFeatureTable:
    def test_for_patch_follows_ids(self):
        matrix = InteractionMatrix(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))
        matrix = matrix.permuted(np.array([1, 0]), np.array([0, 1]))
        table = FeatureTable(np.array([[1.0], [2.0]]), np.array([[3.0, 4.0], [5.0, 6.0]]))
        patch = Patch.from_matrix(matrix, [0], [1])
        users, items = table.for_patch(matrix, patch)
        assert users.tolist() == [[2.0]]
        assert items.tolist() == [[5.0, 6.0]]
        assert (table.d_user, table.d_item) == (1, 2)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            FeatureTable(np.array([[np.nan]]), np.zeros((1, 1)))
