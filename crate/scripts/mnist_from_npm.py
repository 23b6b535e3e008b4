#!/usr/bin/env python3
"""Convert the digit samples bundled with the `mnist` npm package into IDX files.

The npm package ships ~10k MNIST digits as normalized JSON arrays (one file per
digit). This writes the standard four IDX files, keeping 6/7 of each digit for
the train split and the rest for the test split (the 60k/10k MNIST ratio).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def write_idx(path, dims, payload):
    magic = bytes([0, 0, 8, len(dims)])
    with open(path, "wb") as f:
        f.write(magic)
        for n in dims:
            f.write(struct.pack(">I", n))
        f.write(bytes(payload))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    per_digit = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        pixels = [min(255, max(0, round(v * 255))) for v in raw]
        n = len(pixels) // (SIDE * SIDE)
        per_digit.append([pixels[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(n)])

    splits = {"train": [], "test": []}
    longest = max(len(images) for images in per_digit)
    # Interleave digits so neither split is sorted by label.
    for i in range(longest):
        for digit, images in enumerate(per_digit):
            if i < len(images):
                cut = len(images) * 6 // 7
                splits["train" if i < cut else "test"].append((digit, images[i]))

    names = {"train": "train", "test": "t10k"}
    for split, samples in splits.items():
        prefix = names[split]
        images = [p for _, image in samples for p in image]
        labels = [digit for digit, _ in samples]
        write_idx(out / f"{prefix}-images-idx3-ubyte", [len(samples), SIDE, SIDE], images)
        write_idx(out / f"{prefix}-labels-idx1-ubyte", [len(samples)], labels)
        print(f"{split}: {len(samples)} samples")


if __name__ == "__main__":
    main()
