"""Convert the digits in the npm ``mnist`` package (v1.1.0) to gzipped IDX files.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python tools/mnist10k_from_npm.py package/src/digits tests/data

The package stores 10,000 MNIST training digits as JSON lists of pixel/255
rounded to three decimals; multiplying by 255 and rounding recovers the
original bytes. Output keeps the package order (grouped by digit).
"""

import gzip
import json
import os
import struct
import sys

import numpy as np


def main(src: str, dst: str) -> None:
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64).reshape(-1, 28, 28)
        images.append(np.round(flat * 255).astype(np.uint8))
        labels.append(np.full(len(flat), digit, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)
    os.makedirs(dst, exist_ok=True)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(os.path.join(dst, "mnist10k-images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">4I", 0x00000803, *images.shape) + images.tobytes())
    with gzip.GzipFile(os.path.join(dst, "mnist10k-labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">2I", 0x00000801, len(labels)) + labels.tobytes())
    print(f"{len(labels)} digits written to {dst}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
