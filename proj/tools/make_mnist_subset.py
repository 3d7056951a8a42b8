#!/usr/bin/env python3
"""Builds the bundled MNIST subset (data/mnist5k) in gzipped IDX format.

The source is the 5000-image MNIST sample (500 per digit) shipped inside the
mlxtend wheel as mlxtend/data/data/mnist_5k.csv.gz (784 pixel columns followed
by the label). Each class is split 400/100 into train/test and both splits are
shuffled with a fixed seed so the files look like ordinary MNIST files.

usage: make_mnist_subset.py path/to/mlxtend-*.whl out_dir
"""
import gzip
import struct
import sys
import zipfile

import numpy as np


def write_idx(path, array, magic):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for extent in array.shape:
            f.write(struct.pack(">I", extent))
        f.write(array.astype(np.uint8).tobytes())


def main():
    wheel, out_dir = sys.argv[1], sys.argv[2]
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().split("\n")
    table = np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.int64)
    images, labels = table[:, :-1], table[:, -1]

    train_idx, test_idx = [], []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        train_idx.extend(members[:400])
        test_idx.extend(members[400:])
    rng = np.random.default_rng(20210601)
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    for split, idx in (("train", train_idx), ("t10k", test_idx)):
        write_idx(f"{out_dir}/{split}-images-idx3-ubyte.gz",
                  images[idx].reshape(-1, 28, 28), 0x00000803)
        write_idx(f"{out_dir}/{split}-labels-idx1-ubyte.gz", labels[idx], 0x00000801)


if __name__ == "__main__":
    main()
