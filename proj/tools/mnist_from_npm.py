#!/usr/bin/env python3
"""Convert the digit set shipped in the npm `mnist` package into IDX files.

The package bundles 10,000 MNIST digits as JSON (pixels in [0,1], rounded to
three decimals). This script rebuilds byte images and writes a deterministic
train/test split in the standard IDX layout:

    <out>/train-images-idx3-ubyte  <out>/train-labels-idx1-ubyte
    <out>/t10k-images-idx3-ubyte   <out>/t10k-labels-idx1-ubyte

Usage:
    npm pack mnist            # produces mnist-<ver>.tgz
    python3 tools/mnist_from_npm.py mnist-1.1.0.tgz data/mnist
"""

import argparse
import io
import json
import struct
import sys
import tarfile
from pathlib import Path


def read_digits(tgz_path):
    digits = {}
    with tarfile.open(tgz_path, "r:gz") as tar:
        for label in range(10):
            member = tar.getmember(f"package/src/digits/{label}.json")
            payload = json.load(io.TextIOWrapper(tar.extractfile(member)))
            flat = payload["data"]
            if len(flat) % 784 != 0:
                raise ValueError(f"digit {label}: {len(flat)} values is not a multiple of 784")
            digits[label] = [flat[i:i + 784] for i in range(0, len(flat), 784)]
    return digits


def to_bytes(pixels):
    return bytes(max(0, min(255, round(v * 255.0))) for v in pixels)


def write_idx(out_dir, prefix, samples):
    images = out_dir / f"{prefix}-images-idx3-ubyte"
    labels = out_dir / f"{prefix}-labels-idx1-ubyte"
    with open(images, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(to_bytes(pixels))
    with open(labels, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main(argv):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("tgz")
    parser.add_argument("out_dir")
    parser.add_argument("--test-fraction", type=float, default=0.2)
    args = parser.parse_args(argv)

    digits = read_digits(args.tgz)
    train, test = [], []
    # Per-class split keeps class balance identical in both halves; the
    # interleave makes the order label-mixed without needing an RNG.
    for label, rows in digits.items():
        cut = len(rows) - int(round(len(rows) * args.test_fraction))
        train += [(r, label) for r in rows[:cut]]
        test += [(r, label) for r in rows[cut:]]
    train.sort(key=lambda s: (interleave_key(s), s[1]))
    test.sort(key=lambda s: (interleave_key(s), s[1]))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out, "train", train)
    write_idx(out, "t10k", test)
    print(f"wrote {len(train)} train / {len(test)} test examples to {out}")


def interleave_key(sample):
    # Stable content hash used only to interleave classes.
    h = 2166136261
    for b in to_bytes(sample[0][::7]):
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


if __name__ == "__main__":
    main(sys.argv[1:])
