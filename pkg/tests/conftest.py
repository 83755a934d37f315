import os
from pathlib import Path

import numpy as np
import pytest

from grouprec.data import load_ratings

ROOT = Path(__file__).resolve().parents[1]


def write_split(path: Path, rows, sep=";"):
    path.write_text("".join(f"{u}{sep}{i}{sep}{r}\n" for u, i, r in rows))
    return path


def synthetic_rows(num_users=50, num_items=40, density=0.5, seed=0, k=3):
    """Low-rank ratings on a 1..5 half-star grid, split 85/15."""
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(num_users, k))
    q = rng.normal(size=(num_items, k))
    score = 3.0 + (p @ q.T) / np.sqrt(k)
    rows = []
    for u in range(num_users):
        for i in range(num_items):
            if rng.random() < density or i == u % num_items:
                r = float(np.clip(np.round(score[u, i] * 2) / 2, 1.0, 5.0))
                rows.append((f"u{u}", f"i{i}", r))
    order = rng.permutation(len(rows))
    n_test = len(rows) * 15 // 100
    test = [rows[j] for j in sorted(order[:n_test])]
    train = [rows[j] for j in sorted(order[n_test:])]
    return train, test


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    d = tmp_path_factory.mktemp("synthetic")
    train, test = synthetic_rows()
    return load_ratings(write_split(d / "train.csv", train), write_split(d / "test.csv", test),
                        name="synthetic")


@pytest.fixture(scope="session")
def synthetic_paths(tmp_path_factory):
    d = tmp_path_factory.mktemp("synthetic_files")
    train, test = synthetic_rows()
    return write_split(d / "train.csv", train), write_split(d / "test.csv", test)


def _data_dir(env, default):
    p = Path(os.environ.get(env, ROOT / "data" / default))
    return p if (p / "train.csv").exists() and (p / "test.csv").exists() else None


@pytest.fixture(scope="session")
def ml100k_dir():
    d = _data_dir("GROUPREC_ML100K", "ml100k")
    if d is None:
        pytest.skip("MovieLens100K files not found; run scripts/fetch_ml100k.py")
    return d


@pytest.fixture(scope="session")
def ml100k(ml100k_dir):
    return load_ratings(ml100k_dir / "train.csv", ml100k_dir / "test.csv", name="ml100k")


def to_float64(*models):
    """Promote model parameters to float64 in place (for finite differences)."""
    for m in models:
        if hasattr(m, "user_embeddings"):
            m.user_embeddings = m.user_embeddings.astype(np.float64)
            m.item_embeddings = m.item_embeddings.astype(np.float64)
            layers = m.tower
        else:
            layers = m.layers
        for layer in layers:
            layer.weights = layer.weights.astype(np.float64)
            layer.bias = layer.bias.astype(np.float64)
    return models


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  [{detail}]")
