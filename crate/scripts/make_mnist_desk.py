#!/usr/bin/env python3
"""Build the desk-scale MNIST fixture in data/mnist-desk/.

Input is the `mnist` npm package (1000 MNIST digits per class, stored as
pixel/255 rounded to 3 decimals). Every 8th digit of each class goes to the
test pool, the rest to the training pool. Output is gzipped IDX.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_desk.py package/src/digits data/mnist-desk
"""

import gzip
import json
import struct
import sys
from pathlib import Path


def write_idx(path, images, labels):
    with gzip.GzipFile(path / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with gzip.GzipFile(path / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    pools = {"train": ([], []), "test": ([], [])}
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for k in range(len(flat) // 784):
            img = [round(v * 255) for v in flat[k * 784:(k + 1) * 784]]
            pool = "test" if k % 8 == 0 else "train"
            pools[pool][0].append(img)
            pools[pool][1].append(digit)
    for name, (images, labels) in pools.items():
        out = dst / name
        out.mkdir(parents=True, exist_ok=True)
        write_idx(out, images, labels)
        print(f"{name}: {len(labels)} digits")


if __name__ == "__main__":
    main(*sys.argv[1:3])
