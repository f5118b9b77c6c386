"""Convert the digit JSON files shipped in the npm ``mnist`` package to IDX.

The npm package (https://www.npmjs.com/package/mnist, MIT licensed) bundles
10,000 MNIST digits, 1000 per class, with pixels stored as intensities
rounded to three decimals. Multiplying by 255 and rounding recovers the
original bytes exactly (0.001 < 1/510).

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/make_mnist_idx.py package/src/digits data/mnist
"""

import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    images, labels = [], []
    for digit in range(10):
        data = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        arr = np.asarray(data, dtype=np.float64).reshape(-1, 28, 28)
        images.append(np.rint(arr * 255.0).astype(np.uint8))
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    # interleave classes so any prefix is roughly balanced
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    n, h, w = images.shape
    with gzip.GzipFile(args.out_dir / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, h, w))
        f.write(images.tobytes())
    with gzip.GzipFile(args.out_dir / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.tobytes())
    print(f"wrote {n} samples to {args.out_dir}")


if __name__ == "__main__":
    main()
