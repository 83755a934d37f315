"""Materialize MovieLens100K as train/test rating files.

The raw 100,000 ratings are taken from the copy bundled in the ``recbole``
wheel (downloaded with pip, not installed). The split is seeded and random,
with 7,974 test ratings and 92,026 train ratings.

    python scripts/fetch_ml100k.py --out data/ml100k
"""
import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"
N_TEST = 7974


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ml100k")
    ap.add_argument("--seed", type=int, default=2023)
    ap.add_argument("--wheel", help="use an already downloaded recbole wheel")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel
        if wheel is None:
            subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp,
                            "recbole==1.2.1"], check=True)
            wheel = next(Path(tmp).glob("recbole-*.whl"))
        lines = zipfile.ZipFile(wheel).read(MEMBER).decode().splitlines()[1:]
    rows = [line.split("\t")[:3] for line in lines if line.strip()]
    perm = np.random.default_rng(args.seed).permutation(len(rows))
    test = set(perm[:N_TEST].tolist())
    with open(out / "train.csv", "w", newline="\n") as tr, open(out / "test.csv", "w", newline="\n") as te:
        for k, (u, i, r) in enumerate(rows):
            (te if k in test else tr).write(f"{u};{i};{float(r)!r}\n")
    print(f"wrote {len(rows) - N_TEST} train / {N_TEST} test ratings to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
