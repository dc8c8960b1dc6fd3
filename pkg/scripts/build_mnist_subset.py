"""Pack the 10k-digit MNIST subset shipped by the npm ``mnist`` package into IDX files.

Usage::

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist

The npm package stores each digit class as a flat list of pixel intensities
normalised to [0, 1] with three decimals; they are rescaled to uint8 here.
A seeded shuffle splits the pool into 9000 training and 1000 test images,
written as gzip-compressed ``train-*`` / ``t10k-*`` IDX files.
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

N_TEST = 1000
SEED = 20201016


def write_idx(path, array, magic):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">I", magic))
        for dim in array.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(array.astype(np.uint8).tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    for digit in range(10):
        raw = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"])
        block = np.rint(raw.reshape(-1, 28, 28) * 255.0).clip(0, 255)
        images.append(block)
        labels.append(np.full(len(block), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(SEED).permutation(len(labels))
    images, labels = images[order], labels[order]

    dst.mkdir(parents=True, exist_ok=True)
    write_idx(dst / "train-images-idx3-ubyte.gz", images[N_TEST:], 0x00000803)
    write_idx(dst / "train-labels-idx1-ubyte.gz", labels[N_TEST:], 0x00000801)
    write_idx(dst / "t10k-images-idx3-ubyte.gz", images[:N_TEST], 0x00000803)
    write_idx(dst / "t10k-labels-idx1-ubyte.gz", labels[:N_TEST], 0x00000801)
    print(f"wrote {len(labels) - N_TEST} train / {N_TEST} test images to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
