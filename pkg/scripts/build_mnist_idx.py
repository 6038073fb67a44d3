"""Assemble MNIST IDX files from offline bundles when the official archives are unreachable.

Two redistributions are supported:

* the ``digits/{0..9}.json`` files of the npm ``mnist`` package
  (10,000 images stored as pixel/255 rounded to 3 decimals), written as
  the ``t10k`` split;
* ``mnist_5k.csv.gz`` shipped in the ``mlxtend`` wheel (5,000 training
  images, 784 integer pixels followed by the label), written as the
  ``train`` split.

Usage::

    python3 scripts/build_mnist_idx.py --npm-digits DIR --mlxtend-csv FILE --out data/mnist
"""

import argparse
import gzip
import json
from pathlib import Path

import numpy as np

from padro.data import write_idx


def from_npm(digits_dir):
    images, labels = [], []
    for d in range(10):
        data = json.loads(Path(digits_dir, f"{d}.json").read_text())["data"]
        arr = np.asarray(data, dtype=float).reshape(-1, 28, 28)
        images.append(np.rint(arr * 255).astype(np.uint8))
        labels.append(np.full(len(arr), d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def from_mlxtend(csv_path):
    with gzip.open(csv_path, "rt") as fh:
        rows = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    return rows[:, :784].reshape(-1, 28, 28).astype(np.uint8), rows[:, 784].astype(np.uint8)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--npm-digits", type=Path, help="directory holding 0.json .. 9.json")
    p.add_argument("--mlxtend-csv", type=Path, help="path to mnist_5k.csv.gz")
    p.add_argument("--out", type=Path, default=Path("data/mnist"))
    args = p.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    for split, source, reader in (("t10k", args.npm_digits, from_npm),
                                  ("train", args.mlxtend_csv, from_mlxtend)):
        if source is None:
            continue
        images, labels = reader(source)
        write_idx(args.out / f"{split}-images-idx3-ubyte.gz", images)
        write_idx(args.out / f"{split}-labels-idx1-ubyte.gz", labels)
        print(f"{split}: {len(images)} images -> {args.out}")


if __name__ == "__main__":
    main()
