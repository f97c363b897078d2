#!/usr/bin/env python3
"""Build a 10k-image MNIST subset in IDX format from the npm `mnist` package.

The npm package (https://www.npmjs.com/package/mnist) ships 10,000 MNIST
digits as JSON arrays of intensities in [0, 1]. This script shuffles them
with a fixed seed and writes

    train-images-idx3-ubyte / train-labels-idx1-ubyte   (9000 images)
    t10k-images-idx3-ubyte  / t10k-labels-idx1-ubyte    (1000 images)

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_from_npm.py package/ /path/to/out
"""
import json
import os
import random
import struct
import sys

SIDE = 28
N_TEST = 1000


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    samples = []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            raw = json.load(f)["data"]
        n = len(raw) // (SIDE * SIDE)
        for i in range(n):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            img = [max(0, min(255, int(round(v * 255.0)))) for v in px]
            samples.append((img, digit))
    random.Random(20240501).shuffle(samples)
    test, train = samples[:N_TEST], samples[N_TEST:]
    os.makedirs(out, exist_ok=True)
    for name, part in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(out, f"{name}-images-idx3-ubyte"), [s[0] for s in part])
        write_idx_labels(os.path.join(out, f"{name}-labels-idx1-ubyte"), [s[1] for s in part])
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
