"""Rating file ingestion and the immutable train/test dataset."""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np


class DataFormatError(ValueError):
    pass


class RatingTriple(NamedTuple):
    user: int
    item: int
    rating: float


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RatingSplit:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray

    def __len__(self) -> int:
        return len(self.ratings)

    def __iter__(self) -> Iterator[RatingTriple]:
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield RatingTriple(u, i, r)


@dataclass(frozen=True)
class ItemRaters:
    """Inverted index of one split: for each item, who rated it and how."""

    users: dict[int, np.ndarray]
    ratings: dict[int, np.ndarray]

    def raters(self, item: int) -> np.ndarray:
        return self.users.get(item, _EMPTY)

    def rating_of(self, item: int, user: int) -> float | None:
        us = self.users.get(item)
        if us is None:
            return None
        hit = np.flatnonzero(us == user)
        return float(self.ratings[item][hit[0]]) if hit.size else None


_EMPTY = _frozen(np.zeros(0, dtype=np.int64))


def _build_index(split: RatingSplit) -> ItemRaters:
    order = np.lexsort((split.users, split.items))
    items = split.items[order]
    cuts = np.flatnonzero(np.diff(items)) + 1
    users, ratings = {}, {}
    for chunk in np.split(order, cuts):
        if chunk.size:
            it = int(split.items[chunk[0]])
            users[it] = _frozen(split.users[chunk].copy())
            ratings[it] = _frozen(split.ratings[chunk].copy())
    return ItemRaters(users, ratings)


@dataclass(frozen=True)
class RatingDataset:
    name: str
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    train: RatingSplit
    test: RatingSplit
    scale_min: float
    scale_max: float
    train_index: ItemRaters = field(repr=False)
    test_index: ItemRaters = field(repr=False)
    user_index: dict[str, int] = field(repr=False)
    item_index: dict[str, int] = field(repr=False)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def split(self, name: str) -> RatingSplit:
        return {"train": self.train, "test": self.test}[_split_name(name)]

    def index(self, name: str) -> ItemRaters:
        return {"train": self.train_index, "test": self.test_index}[_split_name(name)]

    def id_map_digest(self) -> str:
        h = hashlib.sha256()
        for ids in (self.user_ids, self.item_ids):
            h.update("\n".join(ids).encode())
            h.update(b"\0")
        return h.hexdigest()

    def digest(self) -> str:
        h = hashlib.sha256(self.id_map_digest().encode())
        for s in (self.train, self.test):
            for a in (s.users, s.items, s.ratings):
                h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr((self.scale_min, self.scale_max)).encode())
        return h.hexdigest()


def _split_name(name: str) -> str:
    name = str(name).lower()
    if name not in ("train", "test"):
        raise ValueError(f"unknown split {name!r}")
    return name


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _read_rows(path: Path, sep: str) -> list[tuple[str, str, float, int]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ratings file not found: {path}")
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = [p.strip() for p in line.split(sep)]
            # header: non-numeric leading and rating fields (raw ids may be alphanumeric)
            if lineno == 1 and not _is_number(parts[0]) and (len(parts) < 3 or not _is_number(parts[2])):
                continue
            if len(parts) < 3:
                raise DataFormatError(f"{path}:{lineno}: expected user{sep}item{sep}rating, got {line!r}")
            try:
                rating = float(parts[2])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: rating {parts[2]!r} is not a number") from None
            if not math.isfinite(rating):
                raise DataFormatError(f"{path}:{lineno}: rating must be finite")
            rows.append((parts[0], parts[1], rating, lineno))
    if not rows:
        raise DataFormatError(f"{path}: no ratings")
    return rows


def load_ratings(train_path, test_path, sep: str = ";", scale: tuple[float, float] | None = None,
                 name: str | None = None) -> RatingDataset:
    """Load a train/test pair of rating files into a :class:`RatingDataset`.

    Raw ids are mapped to contiguous indexes in order of first appearance,
    train file first. Without an explicit ``scale`` the observed min/max over
    both files is used.
    """
    train_rows = _read_rows(train_path, sep)
    test_rows = _read_rows(test_path, sep)
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    splits = []
    seen_train: set[tuple[int, int]] = set()
    for path, rows in ((train_path, train_rows), (test_path, test_rows)):
        n = len(rows)
        users = np.empty(n, dtype=np.int64)
        items = np.empty(n, dtype=np.int64)
        ratings = np.empty(n, dtype=np.float64)
        seen: set[tuple[int, int]] = set()
        for k, (ru, ri, r, lineno) in enumerate(rows):
            u = user_index.setdefault(ru, len(user_index))
            i = item_index.setdefault(ri, len(item_index))
            if (u, i) in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate rating for user {ru!r}, item {ri!r}")
            if (u, i) in seen_train:
                raise DataFormatError(f"{path}:{lineno}: pair ({ru!r}, {ri!r}) also present in train")
            seen.add((u, i))
            users[k], items[k], ratings[k] = u, i, r
        splits.append(RatingSplit(_frozen(users), _frozen(items), _frozen(ratings)))
        seen_train = seen
    train, test = splits
    lo = float(min(train.ratings.min(), test.ratings.min()))
    hi = float(max(train.ratings.max(), test.ratings.max()))
    if scale is not None:
        lo, hi = float(scale[0]), float(scale[1])
        for path, s in ((train_path, train), (test_path, test)):
            bad = np.flatnonzero((s.ratings < lo) | (s.ratings > hi))
            if bad.size:
                raise DataFormatError(f"{path}: rating {s.ratings[bad[0]]} outside scale [{lo}, {hi}]")
    return _assemble(name or Path(train_path).stem, user_index, item_index, train, test, lo, hi)


def _assemble(name, user_index, item_index, train, test, lo, hi) -> RatingDataset:
    return RatingDataset(
        name=name,
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
        train=train,
        test=test,
        scale_min=lo,
        scale_max=hi,
        train_index=_build_index(train),
        test_index=_build_index(test),
        user_index=dict(user_index),
        item_index=dict(item_index),
    )


def format_rating(r: float) -> str:
    return repr(float(r))


def write_ratings(dataset: RatingDataset, split: str, path, sep: str = ";") -> None:
    s = dataset.split(split)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, r in s:
            fh.write(f"{dataset.user_ids[u]}{sep}{dataset.item_ids[i]}{sep}{format_rating(r)}\n")


@dataclass(frozen=True)
class DatasetStats:
    name: str
    num_users: int
    num_items: int
    num_train: int
    num_test: int
    sparsity: float
    train_mean: float
    train_variance: float
    scale_min: float
    scale_max: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.as_dict()
        w.writerow(d.keys())
        w.writerow(d.values())
        return buf.getvalue()


def dataset_stats(dataset: RatingDataset) -> DatasetStats:
    r = dataset.train.ratings
    mean = math.fsum(r.tolist()) / len(r)
    var = math.fsum(((r - mean) ** 2).tolist()) / len(r)
    return DatasetStats(
        name=dataset.name,
        num_users=dataset.num_users,
        num_items=dataset.num_items,
        num_train=len(dataset.train),
        num_test=len(dataset.test),
        sparsity=1.0 - len(dataset.train) / (dataset.num_users * dataset.num_items),
        train_mean=mean,
        train_variance=var,
        scale_min=dataset.scale_min,
        scale_max=dataset.scale_max,
    )
