"""Convert the digit JSON shipped in the npm ``mnist`` package into IDX files.

The npm package (https://www.npmjs.com/package/mnist, MIT) bundles 10,000
MNIST digits, about 1,000 per class, as ``src/digits/<label>.json`` with pixel
values divided by 255 and rounded to three decimals.  Multiplying by 255 and
rounding recovers the original bytes exactly.

Usage::

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist10k

Writes gzipped ``train-*`` (8,000 digits) and ``t10k-*`` (2,000 digits) IDX
pairs after a fixed-seed shuffle.
"""
import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def write_idx(path: Path, array: np.ndarray, magic: int) -> None:
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--n-test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20220101)
    args = ap.parse_args()

    images, labels = [], []
    for label in range(10):
        data = json.loads((args.digits_dir / f"{label}.json").read_text())["data"]
        arr = np.round(np.asarray(data, dtype=float) * 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(arr)
        labels.append(np.full(len(arr), label, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    n_test = args.n_test
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", images[n_test:], 0x00000803)
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", labels[n_test:], 0x00000801)
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", images[:n_test], 0x00000803)
    write_idx(args.out_dir / "t10k-labels-idx1-ubyte.gz", labels[:n_test], 0x00000801)
    print(f"wrote {len(labels) - n_test} train and {n_test} test digits to {args.out_dir}")


if __name__ == "__main__":
    main()
