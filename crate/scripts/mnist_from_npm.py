#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package (10,000 MNIST
samples stored as JSON, pixels pre-scaled to [0,1] with 3 decimals) into
gzipped IDX files that `bihalf` reads like the upstream distribution.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist-10k
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    items = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            pixels = bytes(round(v * 255) for v in flat[i : i + 784])
            items.append((pixels, digit))
    random.Random(20200101).shuffle(items)
    dst.mkdir(parents=True, exist_ok=True)
    n = len(items)
    with gzip.GzipFile(dst / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for pixels, _ in items:
            f.write(pixels)
    with gzip.GzipFile(dst / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(label for _, label in items))
    print(f"wrote {n} digits to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
