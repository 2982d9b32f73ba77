#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package into gzipped IDX files.

Usage: mnist_json_to_idx.py <package/src/digits> <out_dir>

Each class file holds 1000 images of 784 pixels scaled to [0, 1]. The first 800
per class go to the training split, the remaining 200 to the test split; both
splits are shuffled with a fixed seed so classes are interleaved.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 800


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        images = [data[i : i + 784] for i in range(0, len(data), 784)]
        for i, img in enumerate(images):
            pixels = [min(255, max(0, round(v * 255))) for v in img]
            (train if i < TRAIN_PER_CLASS else test).append((pixels, label))
    rng = random.Random(20240101)
    for name, split in (("train", train), ("t10k", test)):
        rng.shuffle(split)
        n = len(split)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x00000803, [n, 28, 28],
                  [p for img, _ in split for p in img])
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x00000801, [n],
                  [lab for _, lab in split])
        print(name, n)


if __name__ == "__main__":
    main()
