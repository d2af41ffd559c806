#!/usr/bin/env python3
"""Build the 10k-digit MNIST subset shipped in data/mnist-subset.

Source: the `mnist` npm package (https://github.com/cazala/mnist), which
embeds 10,000 MNIST digits as per-class JSON arrays of pixel intensities
rounded to three decimals. Rounding is well below half a grey level, so
round(v * 255) recovers the original bytes.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset.py package/src/digits data/mnist-subset
"""
import gzip
import json
import os
import random
import struct
import sys

TRAIN = 8000
SEED = 20240601


def main(src, out):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            raw = json.load(fh)["data"]
        assert len(raw) % 784 == 0
        for i in range(len(raw) // 784):
            px = raw[i * 784:(i + 1) * 784]
            images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
            labels.append(digit)
    order = list(range(len(labels)))
    random.Random(SEED).shuffle(order)
    splits = {"train": order[:TRAIN], "t10k": order[TRAIN:]}
    os.makedirs(out, exist_ok=True)
    for name, idx in splits.items():
        with gzip.GzipFile(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
            fh.write(struct.pack(">IIII", 0x803, len(idx), 28, 28))
            for i in idx:
                fh.write(images[i])
        with gzip.GzipFile(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
            fh.write(struct.pack(">II", 0x801, len(idx)))
            fh.write(bytes(labels[i] for i in idx))
        print(name, len(idx))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
