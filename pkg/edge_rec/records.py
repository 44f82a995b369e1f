"""Rating records and datasets."""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Tuple

from .errors import IntegrityError


class DatasetKind(Enum):
    """Source format of a rating dataset."""
    ML_100K = "ml-100k"
    ML_1M = "ml-1m"
    FIXTURE = "fixture"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class RatingRecord:
    """
    One timestamped user-item rating.

    Attributes:
        user_id: Dense user index
        item_id: Dense item index
        rating: Rating on the dataset's original scale
        timestamp: Seconds since the epoch
    """
    user_id: int
    item_id: int
    rating: float
    timestamp: int

    def __post_init__(self):
        if self.user_id < 0 or self.item_id < 0:
            raise ValueError(
                f"Ids must be non-negative, got user {self.user_id}, item {self.item_id}"
            )

    @property
    def key(self) -> Tuple[int, int]:
        return (self.user_id, self.item_id)

    def __repr__(self) -> str:
        return (
            f"RatingRecord(user {self.user_id}, item {self.item_id}, "
            f"{self.rating}, {self.timestamp})"
        )


@dataclass
class RatingDataset:
    """
    Ratings plus raw user and item attributes.

    Attributes:
        records: At most one record per (user, item) pair
        num_users: Number of users (records index into ``range(num_users)``)
        num_items: Number of items
        user_attrs: Raw attribute strings keyed by user index
        item_attrs: Raw attribute strings keyed by item index
        rating_scale: (min, max) of the rating scale
        user_ids: Raw dataset id of each user index
        item_ids: Raw dataset id of each item index
        kind: Source format, which decides how attributes are featurized
    """
    records: List[RatingRecord]
    num_users: int
    num_items: int
    user_attrs: Dict[int, Dict[str, str]] = field(default_factory=dict)
    item_attrs: Dict[int, Dict[str, str]] = field(default_factory=dict)
    rating_scale: Tuple[float, float] = (1.0, 5.0)
    user_ids: List[str] = field(default_factory=list)
    item_ids: List[str] = field(default_factory=list)
    kind: DatasetKind = DatasetKind.ML_100K

    def __post_init__(self):
        low, high = self.rating_scale
        if not low < high:
            raise ValueError(f"Rating scale must satisfy min < max, got {self.rating_scale}")
        if not self.user_ids:
            self.user_ids = [str(u) for u in range(self.num_users)]
        if not self.item_ids:
            self.item_ids = [str(i) for i in range(self.num_items)]
        if len(self.user_ids) != self.num_users or len(self.item_ids) != self.num_items:
            raise IntegrityError(
                f"Id maps ({len(self.user_ids)} users, {len(self.item_ids)} items) do not "
                f"match declared counts ({self.num_users}, {self.num_items})"
            )

        seen = set()
        for record in self.records:
            if record.user_id >= self.num_users or record.item_id >= self.num_items:
                raise IntegrityError(
                    f"{record!r} is outside the declared counts "
                    f"({self.num_users} users, {self.num_items} items)"
                )
            if not low <= record.rating <= high:
                raise IntegrityError(f"{record!r} is outside rating scale {self.rating_scale}")
            if record.key in seen:
                raise IntegrityError(f"Duplicate rating for (user, item) {record.key}")
            seen.add(record.key)

    def with_records(self, records: List[RatingRecord]) -> "RatingDataset":
        """Return a dataset sharing this one's users, items and attributes."""
        return replace(self, records=list(records))

    def ratings(self) -> List[float]:
        return [r.rating for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __repr__(self) -> str:
        return (
            f"RatingDataset({self.kind.value}, {len(self.records)} records, "
            f"{self.num_users} users, {self.num_items} items)"
        )
