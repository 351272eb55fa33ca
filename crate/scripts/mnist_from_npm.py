#!/usr/bin/env python3
"""Build MNIST-format IDX files from the digits bundled in the npm `mnist` package.

The package ships 10k real MNIST digits as per-class JSON arrays of [0, 1]
intensities. They are shuffled with a fixed seed and split into a training
file (first 8000) and a held-out t10k file (last 2000).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package data/mnist
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
TRAIN = 8000


def load(pkg):
    samples = []
    for k in range(10):
        flat = json.loads((pkg / "src" / "digits" / f"{k}.json").read_text())["data"]
        n = len(flat) // (SIDE * SIDE)
        for i in range(n):
            img = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append((bytes(min(255, round(v * 255)) for v in img), k))
    return samples


def write(out, stem, samples):
    with gzip.GzipFile(out / f"{stem}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), SIDE, SIDE))
        for img, _ in samples:
            f.write(img)
    with gzip.GzipFile(out / f"{stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = load(pkg)
    random.Random(0).shuffle(samples)
    write(out, "train", samples[:TRAIN])
    write(out, "t10k", samples[TRAIN:])
    print(f"{len(samples[:TRAIN])} train, {len(samples[TRAIN:])} test -> {out}")


if __name__ == "__main__":
    main()
