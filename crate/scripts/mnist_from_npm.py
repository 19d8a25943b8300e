#!/usr/bin/env python3
"""Build MNIST IDX files from the digits bundled in the `mnist` npm package.

The npm package (cazala/mnist) ships 10,000 MNIST digits as JSON arrays of
pixel intensities already divided by 255 and rounded to three decimals.
This script restores byte intensities, performs a seeded per-class 80/20
split and writes the four standard IDX files:

    train-images-idx3-ubyte  train-labels-idx1-ubyte
    t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20210325)
    train, test = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        imgs = [
            [min(255, max(0, round(v * 255))) for v in data[i : i + 784]]
            for i in range(0, len(data), 784)
        ]
        rng.shuffle(imgs)
        cut = (len(imgs) * 4) // 5
        train += [(img, digit) for img in imgs[:cut]]
        test += [(img, digit) for img in imgs[cut:]]
    rng.shuffle(train)
    rng.shuffle(test)
    for name, rows in (("train", train), ("t10k", test)):
        write_idx_images(dst / f"{name}-images-idx3-ubyte", [r[0] for r in rows])
        write_idx_labels(dst / f"{name}-labels-idx1-ubyte", [r[1] for r in rows])
        print(f"{name}: {len(rows)} images")


if __name__ == "__main__":
    main()
