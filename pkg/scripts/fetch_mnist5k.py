#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the copy bundled in mlxtend.

mlxtend's wheel ships 5000 MNIST training digits (500 per class) as a CSV.
This script pulls the wheel with ``pip download`` (or takes a wheel you
already have), and writes a stratified train/test split as gzip IDX files:

    <out>/mnist5k-train-images-idx3-ubyte.gz   (400 per class)
    <out>/mnist5k-train-labels-idx1-ubyte.gz
    <out>/mnist5k-test-images-idx3-ubyte.gz    (100 per class)
    <out>/mnist5k-test-labels-idx1-ubyte.gz

Full MNIST / Fashion-MNIST / Kuzushiji-MNIST files, if you have them, can be
dropped into the same directory under their usual names and picked up via the
config keys instead.
"""

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from waflae.data import ImageSet, write_idx  # noqa: E402

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps",
                    "--only-binary=:all:", "-d", str(dest), "mlxtend==0.24.0"], check=True)
    return next(dest.glob("mlxtend-*.whl"))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel", type=Path, help="existing mlxtend wheel to read from")
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(Path(tmp))
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]

    rng = np.random.default_rng(args.seed)
    test_idx, train_idx = [], []
    for y in range(10):
        idx = rng.permutation(np.flatnonzero(labels == y))
        test_idx.append(idx[:args.test_per_class])
        train_idx.append(idx[args.test_per_class:])

    args.out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", np.sort(np.concatenate(train_idx))),
                      ("test", np.sort(np.concatenate(test_idx)))):
        subset = ImageSet(pixels[idx].reshape(-1, 28, 28) / 255.0, labels[idx])
        write_idx(subset, args.out / f"mnist5k-{name}-images-idx3-ubyte.gz",
                  args.out / f"mnist5k-{name}-labels-idx1-ubyte.gz")
        print(f"{name}: {len(subset)} images -> {args.out}")


if __name__ == "__main__":
    main()
