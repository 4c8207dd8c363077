"""
Interaction ingestion for private collaborative filtering.

- Reads delimiter-separated interaction logs (``user,item,value[,timestamp]``)
  and the public Amazon review 5-core JSON-lines files
- Binarizes feedback (explicit ratings: 1 iff r > 3; implicit events: 1)
- Builds dense user/item index spaces over every valid interaction
- Splits positives 8:1:1 at random, samples one negative per training positive
- Assigns users to the active (top 20% by training activity) and inactive groups
- Persists the result as a versioned, byte-stable bundle directory
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import sparse

from scripts.dpfair.errors import DataError
from scripts.utils.artifact_io import read_json, save_csv, write_json
from scripts.utils.seed_utils import derive_rng

logger = logging.getLogger(__name__)

BUNDLE_SCHEMA_VERSION = 1
FEEDBACK_MODES = ("explicit", "implicit")
EXPLICIT_POSITIVE_THRESHOLD = 3.0
MIN_SPLIT_SIZE = 10
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    value: float
    timestamp: Optional[int] = None


@dataclass(frozen=True)
class RejectedRow:
    row: int
    reason: str


@dataclass(frozen=True)
class DatasetStats:
    n1: int
    n2: int
    interactions: int
    sparsity: float  # percent

    def as_dict(self) -> dict:
        return {
            "users": self.n1,
            "items": self.n2,
            "interactions": self.interactions,
            "sparsity_pct": round(self.sparsity, 2),
        }


@dataclass(frozen=True)
class UserGroups:
    active: frozenset
    inactive: frozenset

    def __post_init__(self):
        if self.active & self.inactive:
            raise DataError("active and inactive user groups overlap")

    def is_active(self, user: int) -> bool:
        return user in self.active

    def mask(self, n1: int) -> np.ndarray:
        """Boolean array, True for active users."""
        out = np.zeros(n1, dtype=bool)
        out[sorted(self.active)] = True
        return out


def _as_pairs(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"interaction pairs must have shape (n, 2), got {arr.shape}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _encode(pairs: np.ndarray, n2: int) -> np.ndarray:
    return pairs[:, 0] * np.int64(n2) + pairs[:, 1]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Dense-indexed, binarized interactions.

    ``train_pos`` is H, ``negatives[i]`` is the negative item v' paired with the
    i-th training positive, so ``(train_pos[i, 0], train_pos[i, 1], negatives[i])``
    is the i-th BPR triple. Immutable after construction.
    """

    n1: int
    n2: int
    train_pos: np.ndarray
    val_pos: np.ndarray
    test_pos: np.ndarray
    negatives: Optional[np.ndarray] = None
    user_keys: tuple = ()
    item_keys: tuple = ()
    n_interactions: Optional[int] = None
    seed: Optional[int] = None
    feedback: str = "explicit"
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("train_pos", "val_pos", "test_pos"):
            object.__setattr__(self, name, _as_pairs(getattr(self, name)))
        if self.n1 <= 0 or self.n2 <= 0:
            raise DataError(f"empty index space: n1={self.n1}, n2={self.n2}")
        for name in ("train_pos", "val_pos", "test_pos"):
            pairs = getattr(self, name)
            if pairs.size and (
                pairs[:, 0].min() < 0 or pairs[:, 0].max() >= self.n1
                or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= self.n2
            ):
                raise DataError(f"{name} holds indices outside [0, n1) x [0, n2)")
        codes = [_encode(getattr(self, n), self.n2) for n in ("train_pos", "val_pos", "test_pos")]
        for a, b in ((0, 1), (0, 2), (1, 2)):
            if np.intersect1d(codes[a], codes[b]).size:
                raise DataError(f"{SPLITS[a]} and {SPLITS[b]} splits overlap")
        if self.user_keys and len(self.user_keys) != self.n1:
            raise DataError("user_keys length does not match n1")
        if self.item_keys and len(self.item_keys) != self.n2:
            raise DataError("item_keys length does not match n2")
        if self.negatives is not None:
            neg = np.ascontiguousarray(np.asarray(self.negatives, dtype=np.int64))
            if neg.shape != (self.n,):
                raise DataError(f"negatives must pair one item per training positive, got {neg.shape}")
            if neg.size and (neg.min() < 0 or neg.max() >= self.n2):
                raise DataError("negative item index out of range")
            neg_codes = self.train_pos[:, 0] * np.int64(self.n2) + neg
            if np.isin(neg_codes, np.concatenate(codes)).any():
                raise DataError("a sampled negative is a known positive of its user")
            neg.setflags(write=False)
            object.__setattr__(self, "negatives", neg)

    @property
    def n(self) -> int:
        return int(self.train_pos.shape[0])

    def pairs(self, split: str) -> np.ndarray:
        try:
            return {"train": self.train_pos, "validation": self.val_pos, "test": self.test_pos}[split]
        except KeyError:
            raise DataError(f"unknown split '{split}', expected one of {SPLITS}") from None

    def matrix(self, splits: Sequence[str] = ("train",)) -> sparse.csr_matrix:
        """Binary user x item CSR matrix of the union of ``splits``."""
        key = ("matrix", tuple(splits))
        if key not in self._cache:
            pairs = np.concatenate([self.pairs(s) for s in splits]) if splits else np.empty((0, 2), np.int64)
            m = sparse.csr_matrix(
                (np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])),
                shape=(self.n1, self.n2),
            )
            m.sum_duplicates()
            m.sort_indices()
            self._cache[key] = m
        return self._cache[key]

    def items_of(self, user: int, splits: Sequence[str] = ("train",)) -> np.ndarray:
        m = self.matrix(splits)
        return m.indices[m.indptr[user]:m.indptr[user + 1]]

    def triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.negatives is None:
            raise DataError("negatives have not been sampled for this dataset")
        return self.train_pos[:, 0], self.train_pos[:, 1], self.negatives

    def train_counts(self) -> np.ndarray:
        return np.bincount(self.train_pos[:, 0], minlength=self.n1)


RawInput = Union[pd.DataFrame, Sequence[RawInteraction]]


def read_interactions(path: Union[str, Path], sep: str = ",") -> pd.DataFrame:
    """Read a ``user,item,value[,timestamp]`` file into the canonical frame."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Missing interaction file: {path}")
    df = pd.read_csv(
        path, sep=sep, dtype={"user": str, "item": str}, keep_default_na=False, encoding="utf-8"
    )
    missing = {"user", "item", "value"} - set(df.columns)
    if missing:
        raise DataError(f"{path} lacks required columns {sorted(missing)}")
    df["value"] = pd.to_numeric(df["value"], errors="coerce")
    if "timestamp" not in df.columns:
        df["timestamp"] = None
    logger.info(f"Loaded {len(df)} interactions from {path}")
    return df[["user", "item", "value", "timestamp"]]


def read_amazon_5core(path: Union[str, Path]) -> pd.DataFrame:
    """Read an Amazon review 5-core JSON-lines file (optionally gzipped)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Missing review file: {path}")
    df = pd.read_json(path, lines=True, compression="infer", dtype={"reviewerID": str, "asin": str})
    df = df.rename(columns={"reviewerID": "user", "asin": "item", "overall": "value", "unixReviewTime": "timestamp"})
    missing = {"user", "item", "value"} - set(df.columns)
    if missing:
        raise DataError(f"{path} lacks review fields {sorted(missing)}")
    if "timestamp" not in df.columns:
        df["timestamp"] = None
    logger.info(f"Loaded {len(df)} reviews from {path}")
    return df[["user", "item", "value", "timestamp"]]


def raw_frame(raw: RawInput) -> pd.DataFrame:
    if isinstance(raw, pd.DataFrame):
        return raw
    return pd.DataFrame(
        {
            "user": [r.user_key for r in raw],
            "item": [r.item_key for r in raw],
            "value": [r.value for r in raw],
            "timestamp": [r.timestamp for r in raw],
        },
        columns=["user", "item", "value", "timestamp"],
    )


def validate_raw(df: pd.DataFrame) -> tuple[pd.DataFrame, list[RejectedRow]]:
    """Split a raw frame into valid rows and rejected rows with reasons."""
    values = pd.to_numeric(df["value"], errors="coerce").to_numpy(dtype=float)
    users = df["user"].astype(str).str.strip()
    items = df["item"].astype(str).str.strip()
    bad_value = ~np.isfinite(values)
    bad_user = (users == "").to_numpy()
    bad_item = (items == "").to_numpy()
    rejected: list[RejectedRow] = []
    for pos in np.flatnonzero(bad_value | bad_user | bad_item):
        if bad_user[pos]:
            reason = "empty user key"
        elif bad_item[pos]:
            reason = "empty item key"
        else:
            reason = f"non-finite value {df['value'].iloc[pos]!r}"
        rejected.append(RejectedRow(row=int(pos), reason=reason))
    keep = ~(bad_value | bad_user | bad_item)
    valid = pd.DataFrame({"user": users[keep].to_numpy(), "item": items[keep].to_numpy(), "value": values[keep]})
    if rejected:
        logger.warning(f"Rejected {len(rejected)} of {len(df)} rows (first: row {rejected[0].row}, {rejected[0].reason})")
    return valid, rejected


def _labels(values: np.ndarray, feedback: str) -> np.ndarray:
    if feedback == "explicit":
        return (values > EXPLICIT_POSITIVE_THRESHOLD).astype(np.int8)
    if feedback == "implicit":
        graded = ~np.isin(values, (0.0, 1.0))
        if graded.any():
            logger.warning(
                f"Implicit feedback got {int(graded.sum())} values outside {{0, 1}} (e.g. {values[graded][0]:g}); "
                "all positive values are labeled 1, use feedback=explicit for ratings"
            )
        return (values > 0).astype(np.int8)
    raise DataError(f"Unknown feedback mode '{feedback}', expected one of {FEEDBACK_MODES}")


def binarize_frame(raw: RawInput, feedback: str = "explicit") -> tuple[pd.DataFrame, list[RejectedRow]]:
    """Label every valid row; duplicate (user, item) pairs keep their maximum label."""
    valid, rejected = validate_raw(raw_frame(raw))
    valid["label"] = _labels(valid["value"].to_numpy(), feedback)
    labeled = valid.groupby(["user", "item"], sort=True, as_index=False)["label"].max()
    return labeled, rejected


def binarize(raw: RawInput, feedback: str = "explicit") -> tuple[list[tuple[str, str, int]], list[RejectedRow]]:
    """Binarize raw feedback into (user_key, item_key, label) triples.

    Explicit ratings map to 1 iff r > 3; implicit events (clicks) map to 1.
    Label-0 rows are returned so callers can count them, but only label-1 rows
    enter the positive pool.
    """
    labeled, rejected = binarize_frame(raw, feedback)
    rows = [(u, i, int(l)) for u, i, l in labeled[["user", "item", "label"]].itertuples(index=False)]
    return rows, rejected


def build_index(keys: Iterable[str]) -> dict[str, int]:
    """Map keys onto contiguous integers in sorted key order."""
    return {key: idx for idx, key in enumerate(sorted(set(keys)))}


def split(positives: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniformly random 8:1:1 partition of ``positives`` (rows of (user, item)).

    Validation and test each receive floor(n / 10) rows; the remainder goes to
    train. The input is canonically sorted first, so the result depends only on
    the set of positives and the seed.
    """
    pairs = _as_pairs(positives)
    n = len(pairs)
    if n < MIN_SPLIT_SIZE:
        raise DataError(f"Refusing to split {n} positives (need at least {MIN_SPLIT_SIZE})")
    canonical = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    order = derive_rng(seed, "split").permutation(n)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    shuffled = canonical[order]
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    return tuple(p[np.lexsort((p[:, 1], p[:, 0]))] for p in (train, val, test))


def draw_negatives(rng: np.random.Generator, excluded: np.ndarray, n_items: int, size: int) -> np.ndarray:
    """Draw ``size`` items uniformly (with replacement) from [0, n_items) minus ``excluded``."""
    complement = np.setdiff1d(np.arange(n_items, dtype=np.int64), np.asarray(excluded, dtype=np.int64))
    if complement.size == 0:
        raise DataError("user has interacted with every item; no negative exists")
    return rng.choice(complement, size=size, replace=True)


def sample_negatives(dataset: Dataset, seed: int) -> np.ndarray:
    """Pair each training positive (u, v) with v' drawn uniformly from items u never interacted with.

    Users are visited in ascending index order so the draw is deterministic.
    Every known positive of u (all splits) is excluded.
    """
    rng = derive_rng(seed, "negatives")
    known = dataset.matrix(SPLITS)
    users = dataset.train_pos[:, 0]
    out = np.empty(dataset.n, dtype=np.int64)
    order = np.argsort(users, kind="stable")
    bounds = np.searchsorted(users[order], np.arange(dataset.n1 + 1))
    for u in range(dataset.n1):
        rows = order[bounds[u]:bounds[u + 1]]
        if rows.size == 0:
            continue
        excluded = known.indices[known.indptr[u]:known.indptr[u + 1]]
        try:
            out[rows] = draw_negatives(rng, excluded, dataset.n2, rows.size)
        except DataError as e:
            raise DataError(f"user {u}: {e}") from None
    return out


def group_users(dataset: Dataset) -> UserGroups:
    """Top ceil(0.2 * n1) users by training interactions (ties: lower index first) are active."""
    counts = dataset.train_counts()
    order = np.lexsort((np.arange(dataset.n1), -counts))
    n_active = -(-dataset.n1 // 5)
    active = frozenset(int(u) for u in order[:n_active])
    inactive = frozenset(int(u) for u in order[n_active:])
    return UserGroups(active=active, inactive=inactive)


def sparsity(n1: int, n2: int, interactions: int) -> float:
    """Percentage of empty cells in the n1 x n2 interaction matrix."""
    return 100.0 * (1.0 - interactions / (n1 * n2))


def dataset_stats(dataset: Dataset) -> DatasetStats:
    interactions = dataset.n_interactions
    if interactions is None:
        interactions = dataset.n + len(dataset.val_pos) + len(dataset.test_pos)
    return DatasetStats(dataset.n1, dataset.n2, int(interactions), sparsity(dataset.n1, dataset.n2, interactions))


def build_dataset(raw: RawInput, seed: int, feedback: str = "explicit") -> tuple[Dataset, list[RejectedRow]]:
    """binarize -> dense index -> split -> negatives, in one deterministic pass."""
    labeled, rejected = binarize_frame(raw, feedback)
    if labeled.empty:
        raise DataError("no valid interactions to ingest")
    user_index = build_index(labeled["user"])
    item_index = build_index(labeled["item"])
    pos = labeled[labeled["label"] == 1]
    positives = np.column_stack(
        [pos["user"].map(user_index).to_numpy(np.int64), pos["item"].map(item_index).to_numpy(np.int64)]
    )
    train, val, test = split(positives, seed)
    dataset = Dataset(
        n1=len(user_index),
        n2=len(item_index),
        train_pos=train,
        val_pos=val,
        test_pos=test,
        user_keys=tuple(user_index),
        item_keys=tuple(item_index),
        n_interactions=len(labeled),
        seed=seed,
        feedback=feedback,
    )
    dataset = dataclasses.replace(dataset, negatives=sample_negatives(dataset, seed))
    logger.info(
        f"Built dataset: {dataset.n1} users, {dataset.n2} items, "
        f"{dataset.n}/{len(val)}/{len(test)} train/validation/test positives"
    )
    return dataset, rejected


def _keys(keys: tuple, n: int) -> list[str]:
    return list(keys) if keys else [str(i) for i in range(n)]


def save_bundle(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """Write the dataset bundle; identical datasets produce identical bytes."""
    directory = Path(directory)
    groups = group_users(dataset)
    counts = dataset.train_counts()
    users = pd.DataFrame(
        {
            "index": np.arange(dataset.n1),
            "key": _keys(dataset.user_keys, dataset.n1),
            "group": ["active" if groups.is_active(u) else "inactive" for u in range(dataset.n1)],
            "train_count": counts,
        }
    )
    items = pd.DataFrame({"index": np.arange(dataset.n2), "key": _keys(dataset.item_keys, dataset.n2)})
    save_csv(users, directory / "users.csv", ["index", "key", "group", "train_count"])
    save_csv(items, directory / "items.csv", ["index", "key"])
    train = pd.DataFrame({"user": dataset.train_pos[:, 0], "item": dataset.train_pos[:, 1]})
    if dataset.negatives is not None:
        train["negative"] = dataset.negatives
    save_csv(train, directory / "train.csv", ["user", "item", "negative"])
    for name, pairs in (("validation", dataset.val_pos), ("test", dataset.test_pos)):
        save_csv(pd.DataFrame({"user": pairs[:, 0], "item": pairs[:, 1]}), directory / f"{name}.csv", ["user", "item"])
    write_json(
        {
            "schema_version": BUNDLE_SCHEMA_VERSION,
            "n1": dataset.n1,
            "n2": dataset.n2,
            "n_train": dataset.n,
            "n_validation": len(dataset.val_pos),
            "n_test": len(dataset.test_pos),
            "n_interactions": dataset.n_interactions,
            "seed": dataset.seed,
            "feedback": dataset.feedback,
            "n_active": len(groups.active),
            "stats": dataset_stats(dataset).as_dict(),
        },
        directory / "bundle.json",
    )
    logger.info(f"Saved dataset bundle to {directory}")
    return directory


def load_bundle(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "bundle.json"
    if not meta_path.exists():
        raise DataError(f"Missing bundle metadata: {meta_path}")
    meta = read_json(meta_path)
    if meta.get("schema_version") != BUNDLE_SCHEMA_VERSION:
        raise DataError(f"Unsupported bundle schema version {meta.get('schema_version')!r}")
    users = pd.read_csv(directory / "users.csv", dtype={"key": str}, keep_default_na=False)
    items = pd.read_csv(directory / "items.csv", dtype={"key": str}, keep_default_na=False)
    train = pd.read_csv(directory / "train.csv", keep_default_na=False)
    val = pd.read_csv(directory / "validation.csv")
    test = pd.read_csv(directory / "test.csv")
    negatives = None
    if "negative" in train.columns and len(train) and str(train["negative"].iloc[0]) != "":
        negatives = train["negative"].to_numpy(np.int64)
    return Dataset(
        n1=int(meta["n1"]),
        n2=int(meta["n2"]),
        train_pos=train[["user", "item"]].to_numpy(np.int64),
        val_pos=val[["user", "item"]].to_numpy(np.int64),
        test_pos=test[["user", "item"]].to_numpy(np.int64),
        negatives=negatives,
        user_keys=tuple(users.sort_values("index")["key"]),
        item_keys=tuple(items.sort_values("index")["key"]),
        n_interactions=meta.get("n_interactions"),
        seed=meta.get("seed"),
        feedback=meta.get("feedback", "explicit"),
    )


def to_raw_interactions(df: pd.DataFrame) -> list[RawInteraction]:
    out = []
    for user, item, value, ts in df[["user", "item", "value", "timestamp"]].itertuples(index=False):
        ts = None if ts is None or (isinstance(ts, float) and math.isnan(ts)) or ts == "" else int(ts)
        out.append(RawInteraction(str(user), str(item), float(value), ts))
    return out
