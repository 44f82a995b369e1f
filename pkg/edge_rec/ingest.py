"""MovieLens parsing, time-aware splitting, matrix building and featurization."""

import csv
import logging
import math
import re
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import IntegrityError, ParseError
from .matrix import FeatureTable, InteractionMatrix
from .records import DatasetKind, RatingDataset, RatingRecord
from .xform import RatingScaler

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ML100K_OCCUPATIONS = [
    "administrator", "artist", "doctor", "educator", "engineer", "entertainment",
    "executive", "healthcare", "homemaker", "lawyer", "librarian", "marketing",
    "none", "other", "programmer", "retired", "salesman", "scientist", "student",
    "technician", "writer",
]

# ML-1M stores occupations as codes 0..20
ML1M_OCCUPATIONS = [
    "other", "academic/educator", "artist", "clerical/admin", "college/grad student",
    "customer service", "doctor/health care", "executive/managerial", "farmer",
    "homemaker", "K-12 student", "lawyer", "programmer", "retired", "sales/marketing",
    "scientist", "self-employed", "technician/engineer", "tradesman/craftsman",
    "unemployed", "writer",
]

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
]

GENDERS = ["M", "F"]

_TITLE_YEAR = re.compile(r"\((\d{4})\)\s*$")
_DATE_YEAR = re.compile(r"(\d{4})$")
_BAD_LINE = re.compile(r"line (\d+), saw (\d+)")
_EXTRA = "_extra"


def _read_table(
    path: PathLike,
    sep: str,
    columns: Sequence[str],
    required: Optional[Sequence[str]] = None,
    encoding: str = "latin-1",
) -> pd.DataFrame:
    """
    Read a delimited file as strings, indexed by 1-based line number.

    Blank lines are dropped. A line with a missing ``required`` field or with
    more than ``len(columns)`` fields raises ParseError.
    """
    names = [*columns, _EXTRA]
    try:
        frame = pd.read_csv(
            path,
            sep=sep,
            engine="python",
            header=None,
            names=names,
            index_col=False,
            dtype=str,
            keep_default_na=False,
            na_values=[""],
            quoting=csv.QUOTE_NONE,
            skip_blank_lines=False,
            encoding=encoding,
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(columns))
    except pd.errors.ParserError as e:
        found = _BAD_LINE.search(str(e))
        line_number, got = (int(found.group(1)), found.group(2)) if found else (0, "more")
        raise ParseError(str(path), line_number, f"expected {len(columns)} fields, got {got}") from None

    frame.index = frame.index + 1
    blank = frame.apply(lambda column: column.fillna("").astype(str).str.strip().eq("")).all(axis=1)
    frame = frame[~blank].copy()

    bad = frame[_EXTRA].notna() | frame[list(required or columns)].isna().any(axis=1)
    if bad.any():
        line_number = int(bad.idxmax())
        present = np.flatnonzero(frame.loc[line_number].notna().to_numpy())
        raise ParseError(
            str(path), line_number, f"expected {len(columns)} fields, got {present[-1] + 1}"
        )
    return frame.drop(columns=_EXTRA)


def _ratings_frame(path: PathLike, sep: str) -> pd.DataFrame:
    """Parse ``user sep item sep rating sep timestamp`` lines into a typed frame."""
    frame = _read_table(path, sep, ["user", "item", "rating", "timestamp"])
    frame["line"] = frame.index
    if frame.empty:
        return frame

    for column in ("user", "item", "rating", "timestamp"):
        parsed = pd.to_numeric(frame[column].str.strip(), errors="coerce")
        bad = parsed.isna()
        if column != "rating":
            bad |= parsed.notna() & (parsed != parsed.round())
        if bad.any():
            first = frame.loc[bad.idxmax()]
            raise ParseError(
                str(path), int(first["line"]), f"invalid {column} {first[column]!r}"
            )
        frame[column] = parsed

    frame = frame.astype({"user": "int64", "item": "int64", "rating": "float64", "timestamp": "int64"})
    # re-ratings: keep the latest by timestamp, later line on equal timestamps
    frame = frame.sort_values(["timestamp", "line"], kind="stable")
    frame = frame.drop_duplicates(["user", "item"], keep="last")
    return frame


def _id_map(raw_ids: Sequence[int]) -> Dict[int, int]:
    return {raw: index for index, raw in enumerate(sorted(set(raw_ids)))}


def _assemble(
    kind: DatasetKind,
    ratings: pd.DataFrame,
    user_attrs: Dict[int, Dict[str, str]],
    item_attrs: Dict[int, Dict[str, str]],
    source: PathLike,
) -> RatingDataset:
    """Remap raw ids to dense indices and build the dataset."""
    user_ids = _id_map(user_attrs) if user_attrs else _id_map(ratings["user"].tolist() if len(ratings) else [])
    item_ids = _id_map(item_attrs) if item_attrs else _id_map(ratings["item"].tolist() if len(ratings) else [])

    records = []
    if len(ratings):
        for row in ratings.sort_values(["timestamp", "user", "item"]).itertuples(index=False):
            if row.user not in user_ids or row.item not in item_ids:
                raise IntegrityError(
                    f"{source}: line {row.line}: user {row.user} / item {row.item} "
                    f"is outside the declared id range"
                )
            if not 1.0 <= row.rating <= 5.0:
                raise IntegrityError(
                    f"{source}: line {row.line}: rating {row.rating} outside scale (1, 5)"
                )
            records.append(
                RatingRecord(user_ids[row.user], item_ids[row.item], float(row.rating), int(row.timestamp))
            )

    dataset = RatingDataset(
        records=records,
        num_users=len(user_ids),
        num_items=len(item_ids),
        user_attrs={user_ids[raw]: attrs for raw, attrs in user_attrs.items()},
        item_attrs={item_ids[raw]: attrs for raw, attrs in item_attrs.items()},
        rating_scale=(1.0, 5.0),
        user_ids=[str(raw) for raw in sorted(user_ids, key=user_ids.get)],
        item_ids=[str(raw) for raw in sorted(item_ids, key=item_ids.get)],
        kind=kind,
    )
    logger.info("Loaded %r", dataset)
    return dataset


def _int_field(path: PathLike, line_number: int, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(str(path), line_number, f"invalid id {value!r}") from None


def _attrs_by_id(path: PathLike, frame: pd.DataFrame, columns: Sequence[str]) -> Dict[int, Dict[str, str]]:
    """Map each line's integer id to its stripped attribute strings."""
    stripped = frame[list(columns)].fillna("").apply(lambda column: column.str.strip())
    return {
        _int_field(path, line_number, raw_id): row
        for line_number, raw_id, row in zip(
            frame.index, frame["id"].str.strip(), stripped.to_dict("records")
        )
    }


def parse_ml100k(data_path: PathLike, user_path: PathLike, item_path: PathLike) -> RatingDataset:
    """
    Parse the ML-100k distribution.

    Args:
        data_path: ``u.data`` (tab-separated user, item, rating, timestamp)
        user_path: ``u.user`` (pipe-separated id, age, gender, occupation, zip)
        item_path: ``u.item`` (pipe-separated id, title, release date, video date, url, 19 genre flags)

    Returns:
        The dataset, with raw ids remapped to dense indices

    Raises:
        ParseError: On a malformed line
        IntegrityError: If a rating references an undeclared user or item
    """
    user_frame = _read_table(user_path, "|", ["id", "age", "gender", "occupation", "zip"])
    users = _attrs_by_id(user_path, user_frame, ["age", "gender", "occupation", "zip"])

    item_frame = _read_table(
        item_path, "|", ["id", "title", "release", "video_release", "url", *GENRES],
        required=["id", *GENRES],
    )
    flags = item_frame[GENRES].apply(lambda column: column.str.strip().eq("1"))
    item_frame["genres"] = [
        "|".join(g for g, flag in zip(GENRES, row) if flag) for row in flags.itertuples(index=False)
    ]
    item_frame["year"] = item_frame["release"].fillna("").str.strip().str.extract(_DATE_YEAR, expand=False)
    items = _attrs_by_id(item_path, item_frame, ["title", "year", "genres"])

    ratings = _ratings_frame(data_path, "\t")
    return _assemble(DatasetKind.ML_100K, ratings, users, items, data_path)


def parse_ml1m(ratings_path: PathLike, users_path: PathLike, movies_path: PathLike) -> RatingDataset:
    """
    Parse the ML-1M distribution (``::``-separated ``ratings.dat``, ``users.dat``, ``movies.dat``).

    Raw ids are not contiguous in ML-1M; the dataset keeps the raw id of every index.
    """
    user_frame = _read_table(users_path, "::", ["id", "gender", "age", "occupation", "zip"])
    users = _attrs_by_id(users_path, user_frame, ["gender", "age", "occupation", "zip"])

    movie_frame = _read_table(movies_path, "::", ["id", "title", "genres"])
    movie_frame["year"] = movie_frame["title"].str.strip().str.extract(_TITLE_YEAR, expand=False)
    items = _attrs_by_id(movies_path, movie_frame, ["title", "year", "genres"])

    ratings = _ratings_frame(ratings_path, "::")
    return _assemble(DatasetKind.ML_1M, ratings, users, items, ratings_path)


def load_dataset(kind: Union[DatasetKind, str], data_dir: PathLike) -> RatingDataset:
    """Parse a MovieLens distribution directory using its standard file names."""
    kind = DatasetKind(kind)
    data_dir = Path(data_dir)
    if kind == DatasetKind.ML_100K:
        return parse_ml100k(data_dir / "u.data", data_dir / "u.user", data_dir / "u.item")
    if kind == DatasetKind.ML_1M:
        return parse_ml1m(data_dir / "ratings.dat", data_dir / "users.dat", data_dir / "movies.dat")
    raise ValueError(f"No file layout for dataset kind {kind.value}")


def time_split(dataset: RatingDataset, test_fraction: float) -> Tuple[RatingDataset, RatingDataset]:
    """
    Global time-aware split.

    Records are ordered by timestamp with ties broken by (user, item); the last
    ``round(test_fraction * N)`` form the test set.

    Raises:
        ValueError: If the fraction is outside (0, 1) or the dataset has fewer than 2 records
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if len(dataset.records) < 2:
        raise ValueError(f"Cannot split {len(dataset.records)} records")

    ordered = sorted(dataset.records, key=lambda r: (r.timestamp, r.user_id, r.item_id))
    n_test = int(math.floor(test_fraction * len(ordered) + 0.5))
    n_test = min(max(n_test, 1), len(ordered) - 1)
    train = dataset.with_records(ordered[:-n_test])
    test = dataset.with_records(ordered[-n_test:])
    logger.info("Time split: %d train / %d test records", len(train), len(test))
    return train, test


def build_matrix(train: RatingDataset, scaler: RatingScaler) -> InteractionMatrix:
    """Weighted interaction matrix of the training ratings, 0.0 where unknown."""
    values = np.zeros((train.num_users, train.num_items), dtype=np.float64)
    known = np.zeros_like(values, dtype=bool)
    if train.records:
        users = np.array([r.user_id for r in train.records], dtype=np.int64)
        items = np.array([r.item_id for r in train.records], dtype=np.int64)
        ratings = np.array([r.rating for r in train.records], dtype=np.float64)
        values[users, items] = scaler.scale(ratings)
        known[users, items] = True
    return InteractionMatrix(values=values, known=known)


def _one_hot(value: str, vocabulary: Sequence[str], what: str) -> np.ndarray:
    block = np.zeros(len(vocabulary))
    if value:
        if value not in vocabulary:
            raise ValueError(f"Unknown {what} label: {value!r}")
        block[vocabulary.index(value)] = 1.0
    return block


def _user_block(attrs: Dict[str, str], occupations: Sequence[str], kind: DatasetKind) -> np.ndarray:
    age = float(attrs["age"]) / 100.0 if attrs.get("age") else 0.0
    occupation = attrs.get("occupation", "")
    if kind == DatasetKind.ML_1M and occupation.isdigit():
        code = int(occupation)
        if code >= len(ML1M_OCCUPATIONS):
            raise ValueError(f"Unknown occupation label: {occupation!r}")
        occupation = ML1M_OCCUPATIONS[code]
    return np.concatenate([
        [age],
        _one_hot(attrs.get("gender", ""), GENDERS, "gender"),
        _one_hot(occupation, occupations, "occupation"),
    ])


def _genre_block(genres: str) -> np.ndarray:
    block = np.zeros(len(GENRES))
    labels = [g for g in genres.split("|") if g] if genres else []
    unknown = [g for g in labels if g not in GENRES]
    if unknown:
        raise ValueError(f"Unknown genre labels: {unknown}")
    for g in labels:
        block[GENRES.index(g)] = 1.0
    return block


def featurize(dataset: RatingDataset) -> FeatureTable:
    """
    Encode raw user and item attributes as real-valued feature rows.

    MovieLens users become ``[age/100, gender one-hot (2), occupation one-hot (21)]``
    and items ``[genre multi-hot (19), release year min-max normalized]``. Missing
    attributes give all-zero sub-blocks; zip codes are dropped. Synthetic datasets
    carry numeric attributes which pass through in sorted key order.

    Raises:
        ValueError: On an unknown occupation, gender or genre label
    """
    if dataset.kind == DatasetKind.SYNTHETIC:
        return _numeric_features(dataset)

    occupations = ML1M_OCCUPATIONS if dataset.kind == DatasetKind.ML_1M else ML100K_OCCUPATIONS
    user_width = 1 + len(GENDERS) + len(occupations)
    user_features = np.zeros((dataset.num_users, user_width))
    for user, attrs in dataset.user_attrs.items():
        user_features[user] = _user_block(attrs, occupations, dataset.kind)

    item_features = np.zeros((dataset.num_items, len(GENRES) + 1))
    years = {
        item: int(attrs["year"]) for item, attrs in dataset.item_attrs.items() if attrs.get("year")
    }
    low, high = (min(years.values()), max(years.values())) if years else (0, 0)
    for item, attrs in dataset.item_attrs.items():
        item_features[item, :len(GENRES)] = _genre_block(attrs.get("genres", ""))
        if item in years and high > low:
            item_features[item, -1] = (years[item] - low) / (high - low)

    return FeatureTable(
        user_features=user_features,
        item_features=item_features,
        user_columns=["age/100"] + [f"gender={g}" for g in GENDERS] + [f"occupation={o}" for o in occupations],
        item_columns=[f"genre={g}" for g in GENRES] + ["year (min-max)"],
    )


def _numeric_features(dataset: RatingDataset) -> FeatureTable:
    user_keys = sorted({k for attrs in dataset.user_attrs.values() for k in attrs})
    item_keys = sorted({k for attrs in dataset.item_attrs.values() for k in attrs})
    user_features = np.zeros((dataset.num_users, len(user_keys)))
    item_features = np.zeros((dataset.num_items, len(item_keys)))
    for user, attrs in dataset.user_attrs.items():
        user_features[user] = [float(attrs.get(k, 0.0)) for k in user_keys]
    for item, attrs in dataset.item_attrs.items():
        item_features[item] = [float(attrs.get(k, 0.0)) for k in item_keys]
    return FeatureTable(user_features, item_features, user_keys, item_keys)
