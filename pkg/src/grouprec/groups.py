"""Synthetic rating groups and the vote-aggregation functions."""
from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import RatingDataset, format_rating

# Recorded in report metadata.
CONVENTIONS = {"mode_tie": "smallest", "median_even": "mean_of_central_pair"}


class GroupFileError(ValueError):
    pass


class HFunction(str, enum.Enum):
    MIN = "min"
    MAX = "max"
    MEAN = "mean"
    MEDIAN = "median"
    MODE = "mode"


@dataclass(frozen=True)
class GroupSample:
    item: int
    members: tuple[int, ...]
    member_ratings: tuple[float, ...]
    source: str = "train"

    def __post_init__(self):
        if len(self.members) != len(self.member_ratings):
            raise ValueError("members and member_ratings differ in length")
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"duplicate members in group {self.members}")

    @property
    def size(self) -> int:
        return len(self.members)


def aggregate_h(ratings: Sequence[float], h: HFunction | str) -> float:
    """Collapse member ratings into one label.

    Median of an even-length list averages the two central values; mode ties
    go to the smallest value.
    """
    if len(ratings) == 0:
        raise ValueError("cannot aggregate an empty rating list")
    h = HFunction(h)
    values = [float(r) for r in ratings]
    if h is HFunction.MIN:
        return min(values)
    if h is HFunction.MAX:
        return max(values)
    if h is HFunction.MEAN:
        # shifted so that constant lists come back exactly
        lo = min(values)
        return lo + math.fsum(v - lo for v in values) / len(values)
    if h is HFunction.MEDIAN:
        s = sorted(values)
        mid = len(s) // 2
        return s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2.0
    counts = Counter(values)
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def default_group_counts(dataset: RatingDataset | int, group_size: int) -> tuple[int, int]:
    """Train/test group counts scaled from the number of test ratings.

    ``test = round(G * n_test / 5)`` and ``train = round(3.5 * test)``.
    Accepts a dataset or the test-rating count directly.
    """
    n_test = dataset if isinstance(dataset, int) else len(dataset.test)
    test = _round_half_up(group_size * n_test / 5)
    return _round_half_up(3.5 * test), test


def eligible_items(dataset: RatingDataset, split: str, group_size: int) -> np.ndarray:
    index = dataset.index(split)
    return np.array(sorted(i for i, us in index.users.items() if len(us) >= group_size), dtype=np.int64)


def generate_groups(dataset: RatingDataset, split: str, size: int, count: int,
                    seed: int) -> list[GroupSample]:
    """Draw ``count`` groups: a uniform eligible item, then ``size`` of its raters.

    Items are eligible when at least ``size`` users rated them in ``split``.
    Samples are independent, so the same group may be drawn twice.
    """
    if size < 1:
        raise ValueError("group size must be positive")
    if count <= 0:
        raise ValueError(f"group count must be positive, got {count}")
    split = split.lower()
    items = eligible_items(dataset, split, size)
    if items.size == 0:
        raise ValueError(f"no item in the {split} split has at least {size} raters (G={size})")
    index = dataset.index(split)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        item = int(items[rng.integers(items.size)])
        raters = index.users[item]
        pick = np.sort(rng.choice(raters.size, size=size, replace=False))
        out.append(GroupSample(
            item=item,
            members=tuple(int(u) for u in raters[pick]),
            member_ratings=tuple(float(r) for r in index.ratings[item][pick]),
            source=split,
        ))
    return out


def format_group(dataset: RatingDataset, g: GroupSample) -> str:
    users = "|".join(dataset.user_ids[u] for u in g.members)
    ratings = "|".join(format_rating(r) for r in g.member_ratings)
    return f"{dataset.item_ids[g.item]};{users};{ratings};{g.source}\n"


def write_groups(dataset: RatingDataset, groups: Iterable[GroupSample], path) -> None:
    """One group per line: ``item;u1|..|uG;r1|..|rG;split`` with raw ids."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in groups:
            fh.write(format_group(dataset, g))


def read_groups(dataset: RatingDataset, path) -> list[GroupSample]:
    """Parse a group file, checking every member actually rated the item."""
    out = []
    with open(Path(path), encoding="utf-8") as fh:
        for k, line in enumerate(fh):
            line = line.rstrip("\r\n")
            if not line:
                continue
            try:
                out.append(_parse_group(dataset, line))
            except (ValueError, KeyError) as exc:
                raise GroupFileError(f"{path}: record {k}: {exc}") from None
    return out


def _parse_group(dataset: RatingDataset, line: str) -> GroupSample:
    fields = line.split(";")
    if len(fields) != 4:
        raise ValueError(f"expected 4 fields, got {len(fields)}")
    raw_item, raw_users, raw_ratings, split = fields
    split = split.strip().lower()
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    if raw_item not in dataset.item_index:
        raise ValueError(f"unknown item {raw_item!r}")
    item = dataset.item_index[raw_item]
    users, ratings = raw_users.split("|"), raw_ratings.split("|")
    if len(users) != len(ratings):
        raise ValueError("member and rating lists differ in length")
    index = dataset.index(split)
    members = []
    for ru, rr in zip(users, ratings):
        if ru not in dataset.user_index:
            raise ValueError(f"unknown user {ru!r}")
        u = dataset.user_index[ru]
        actual = index.rating_of(item, u)
        if actual is None:
            raise ValueError(f"user {ru!r} did not rate item {raw_item!r} in {split}")
        if actual != float(rr):
            raise ValueError(f"rating {rr} for user {ru!r} does not match dataset value {actual}")
        members.append(u)
    return GroupSample(item, tuple(members), tuple(float(r) for r in ratings), split)


def as_arrays(groups: Sequence[GroupSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack equal-size groups into ``(members (n,G), items (n,), ratings (n,G))``."""
    if not groups:
        raise ValueError("empty group list")
    sizes = {g.size for g in groups}
    if len(sizes) != 1:
        raise ValueError(f"mixed group sizes {sorted(sizes)}")
    members = np.array([g.members for g in groups], dtype=np.int64)
    items = np.array([g.item for g in groups], dtype=np.int64)
    ratings = np.array([g.member_ratings for g in groups], dtype=np.float64)
    return members, items, ratings
