#!/usr/bin/env python3
"""Convert the 10,000-digit MNIST subset shipped in the npm `mnist` package to IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_to_idx.py package/src/digits data/mnist

The package stores each digit class as JSON with pixel intensities already
divided by 255 and rounded to three decimals; multiplying back by 255 and
rounding recovers the original bytes. Samples are interleaved with a fixed
seed so the output resembles the usual MNIST ordering rather than being
sorted by class.
"""
import json
import random
import struct
import sys
from pathlib import Path


def main():
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        sys.exit(1)
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)

    samples = []
    for digit in range(10):
        values = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(values) % 784 == 0
        for i in range(len(values) // 784):
            chunk = values[i * 784:(i + 1) * 784]
            samples.append((bytes(int(round(v * 255)) for v in chunk), digit))

    random.Random(20200611).shuffle(samples)
    n = len(samples)

    with open(dst / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with open(dst / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main()
