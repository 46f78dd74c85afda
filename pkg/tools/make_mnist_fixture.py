"""Convert the 5000-sample MNIST CSV shipped in the mlxtend wheel to IDX fixtures.

Usage:
    pip download mlxtend==0.24.0 --no-deps -d /tmp/w
    python3 -m zipfile -e /tmp/w/mlxtend-0.24.0-py3-none-any.whl /tmp/mlx
    python3 tools/make_mnist_fixture.py /tmp/mlx/mlxtend/data/data/mnist_5k.csv.gz tests/data

Each CSV row is 784 pixel values followed by the digit label. The output is
mnist5k-images-idx3-ubyte.gz and mnist5k-labels-idx1-ubyte.gz (gzip mtime 0,
so reruns are byte-identical).
"""

from __future__ import annotations

import argparse
import gzip
from pathlib import Path

import numpy as np

from pnc.data import write_idx


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("csv")
    p.add_argument("out_dir")
    args = p.parse_args(argv)
    with gzip.open(args.csv, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    if table.shape[1] != 785:
        raise SystemExit(f"expected 785 columns, got {table.shape[1]}")
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist5k-images-idx3-ubyte.gz", images.astype(np.uint8))
    write_idx(out / "mnist5k-labels-idx1-ubyte.gz", labels.astype(np.uint8))
    print(f"wrote {len(images)} images, label counts {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main()
