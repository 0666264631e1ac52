#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into IDX files.

The package ships 10,000 MNIST digits as per-class JSON arrays of 784
floats in [0, 1] (three decimals). This script re-quantizes them to bytes
and writes a deterministic 8,000 / 2,000 train/test split in the standard
IDX layout, so the toolkit can run without downloading the full dataset.

usage: mnist_from_npm.py <path/to/package/src/digits> <out_dir>
"""
import json
import os
import random
import struct
import sys


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = sys.argv[1], sys.argv[2]
    os.makedirs(out, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            rows = json.load(f)["data"]
        flat = [max(0, min(255, round(v * 255))) for v in rows]
        samples = [flat[i:i + 784] for i in range(0, len(flat), 784)]
        cut = len(samples) * 4 // 5
        train += [(s, digit) for s in samples[:cut]]
        test += [(s, digit) for s in samples[cut:]]
    rng = random.Random(20190101)
    rng.shuffle(train)
    rng.shuffle(test)
    write_images(os.path.join(out, "train-images-idx3-ubyte"), [s for s, _ in train])
    write_labels(os.path.join(out, "train-labels-idx1-ubyte"), [y for _, y in train])
    write_images(os.path.join(out, "t10k-images-idx3-ubyte"), [s for s, _ in test])
    write_labels(os.path.join(out, "t10k-labels-idx1-ubyte"), [y for _, y in test])
    print(f"train={len(train)} test={len(test)} -> {out}")


if __name__ == "__main__":
    main()
