#!/usr/bin/env python3
"""Build IDX files from the MNIST digits bundled in the npm `mnist` package.

The package ships 10,000 real MNIST digits as JSON arrays of pixel/255 values
rounded to three decimals; round(v * 255) recovers the original bytes exactly.
Each digit class is split 80/20 into train/test and both splits are shuffled
with a fixed seed, then written gzip-compressed in IDX format.

Usage: prepare_mnist.py <path-to-extracted-npm-package> <out-dir>
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        raw = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        count = len(raw) // 784
        samples = []
        for k in range(count):
            px = raw[k * 784:(k + 1) * 784]
            b = [int(round(v * 255)) for v in px]
            assert all(abs(round(x / 255, 3) - v) < 1e-9 for x, v in zip(b, px))
            samples.append((b, digit))
        cut = (count * 4) // 5
        train += samples[:cut]
        test += samples[cut:]
    rng = random.Random(20220707)
    rng.shuffle(train)
    rng.shuffle(test)
    for name, split in (("train", train), ("t10k", test)):
        write_images(out / f"{name}-images-idx3-ubyte.gz", [s[0] for s in split])
        write_labels(out / f"{name}-labels-idx1-ubyte.gz", [s[1] for s in split])
        print(name, len(split))


if __name__ == "__main__":
    main()
