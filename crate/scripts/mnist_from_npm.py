#!/usr/bin/env python3
"""Convert the digit bundle shipped in the `mnist` npm package into IDX files.

The npm package (https://www.npmjs.com/package/mnist, MIT) carries 10,000
MNIST digits as JSON arrays of pixel intensities quantized to k/255. This
script recovers the raw bytes and writes gzip-compressed IDX files in the
canonical MNIST layout, splitting each digit's samples 80/20 (in file order)
into `train` and `t10k` files.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

SIDE = 28
TRAIN_FRACTION = 0.8


def main():
    src = Path(sys.argv[1])
    dst = Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    split = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        flat = json.load(open(src / f"{digit}.json"))["data"]
        assert len(flat) % (SIDE * SIDE) == 0
        count = len(flat) // (SIDE * SIDE)
        cut = int(round(count * TRAIN_FRACTION))
        for i in range(count):
            px = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            raw = bytes(int(round(v * 255)) for v in px)
            name = "train" if i < cut else "t10k"
            split[name][0].append(raw)
            split[name][1].append(digit)
    for name, (images, labels) in split.items():
        with gzip.GzipFile(dst / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(images), SIDE, SIDE))
            for img in images:
                f.write(img)
        with gzip.GzipFile(dst / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(labels)))
            f.write(bytes(labels))
        print(name, len(images))


if __name__ == "__main__":
    main()
