import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grouprec.data import load_ratings
from grouprec.groups import (GroupFileError, GroupSample, HFunction, aggregate_h, default_group_counts,
                             generate_groups, read_groups, write_groups)
from conftest import write_split


def test_mean():
    assert aggregate_h([2, 4], "mean") == 3


def test_median_even():
    assert aggregate_h([1, 2, 3, 4], HFunction.MEDIAN) == 2.5


def test_median_odd():
    assert aggregate_h([5, 1, 3], HFunction.MEDIAN) == 3


def test_mode_and_tie():
    assert aggregate_h([2, 2, 5], "mode") == 2
    assert aggregate_h([2, 5], "mode") == 2
    assert aggregate_h([5, 4, 4, 5, 1], "mode") == 4


def test_min_max():
    assert aggregate_h([3, 1, 2], "min") == 1 and aggregate_h([3, 1, 2], "max") == 3


def test_empty_list():
    with pytest.raises(ValueError):
        aggregate_h([], "mean")


ratings_lists = st.lists(st.sampled_from([0.5 * k for k in range(1, 21)]), min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(ratings_lists)
def test_h_bounded_by_min_max(rs):
    lo, hi = min(rs), max(rs)
    for h in HFunction:
        assert lo <= aggregate_h(rs, h) <= hi


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 10), st.integers(1, 10))
def test_h_constant_list(r, n):
    for h in HFunction:
        assert aggregate_h([r] * n, h) == r


@pytest.mark.parametrize("n_test,g,expected", [
    (89178, 5, (312124, 89179)),
    (2819, 10, (19734, 5639)),
])
def test_default_counts_paper_cells(n_test, g, expected):
    got = default_group_counts(n_test, g)
    assert abs(got[0] - expected[0]) <= 2 and abs(got[1] - expected[1]) <= 2


def test_toy_single_eligible_item(tmp_path):
    tr = write_split(tmp_path / "tr", [("a", "x", 1), ("b", "x", 2), ("a", "y", 3), ("c", "z", 4)])
    te = write_split(tmp_path / "te", [("c", "x", 5)])
    ds = load_ratings(tr, te)
    groups = generate_groups(ds, "train", 2, 20, seed=0)
    assert len(groups) == 20
    assert {g.item for g in groups} == {ds.item_index["x"]}


def test_no_eligible_item(synthetic):
    with pytest.raises(ValueError, match="G=5000"):
        generate_groups(synthetic, "train", 5000, 3, seed=0)


def test_nonpositive_count(synthetic):
    with pytest.raises(ValueError):
        generate_groups(synthetic, "train", 2, 0, seed=0)


@pytest.mark.parametrize("split", ["train", "test"])
@pytest.mark.parametrize("size", [2, 3, 5])
def test_generated_groups_valid(synthetic, split, size):
    groups = generate_groups(synthetic, split, size, 200, seed=size)
    s = synthetic.split(split)
    rated = {(u, i): r for u, i, r in s}
    for g in groups:
        assert len(set(g.members)) == size == len(g.member_ratings)
        assert g.source == split
        for u, r in zip(g.members, g.member_ratings):
            assert rated[(u, g.item)] == r


def test_seed_determinism(synthetic):
    a = generate_groups(synthetic, "train", 3, 100, seed=11)
    b = generate_groups(synthetic, "train", 3, 100, seed=11)
    c = generate_groups(synthetic, "train", 3, 100, seed=12)
    assert a == b and a != c


def test_item_choice_is_uniform_over_eligible(synthetic):
    from grouprec.groups import eligible_items
    items = eligible_items(synthetic, "train", 2)
    groups = generate_groups(synthetic, "train", 2, 20000, seed=3)
    counts = np.bincount([g.item for g in groups], minlength=synthetic.num_items)[items]
    expected = 20000 / len(items)
    # chi-square with len(items)-1 dof; 99.9th percentile bound is loose enough here
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < len(items) + 5 * np.sqrt(2 * len(items))


def test_write_read_round_trip(synthetic, tmp_path):
    groups = generate_groups(synthetic, "train", 3, 1000, seed=1)
    write_groups(synthetic, groups, tmp_path / "g1")
    back = read_groups(synthetic, tmp_path / "g1")
    assert back == groups
    write_groups(synthetic, back, tmp_path / "g2")
    assert (tmp_path / "g1").read_bytes() == (tmp_path / "g2").read_bytes()


def test_hand_written_file(tmp_path):
    tr = write_split(tmp_path / "tr", [("a", "x", 1.5), ("b", "x", 2), ("a", "y", 3)])
    te = write_split(tmp_path / "te", [("c", "x", 5)])
    ds = load_ratings(tr, te)
    (tmp_path / "g").write_text("x;b|a;2.0|1.5;train\n")
    (g,) = read_groups(ds, tmp_path / "g")
    assert g == GroupSample(ds.item_index["x"], (ds.user_index["b"], ds.user_index["a"]), (2.0, 1.5), "train")


def test_corrupted_member_rejected_with_index(synthetic, tmp_path):
    groups = generate_groups(synthetic, "test", 2, 5, seed=1)
    write_groups(synthetic, groups, tmp_path / "g")
    lines = (tmp_path / "g").read_text().splitlines()
    item, users, ratings, split = lines[3].split(";")
    raters = set(synthetic.user_ids[u] for u in synthetic.test_index.raters(synthetic.item_index[item]))
    stranger = next(u for u in synthetic.user_ids if u not in raters)
    lines[3] = ";".join([item, stranger + "|" + users.split("|")[1], ratings, split])
    (tmp_path / "g").write_text("\n".join(lines) + "\n")
    with pytest.raises(GroupFileError, match="record 3"):
        read_groups(synthetic, tmp_path / "g")
