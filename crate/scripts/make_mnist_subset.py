#!/usr/bin/env python3
"""Build the 10k-digit MNIST subset in IDX format.

Source: the `mnist` npm package (MIT), which ships 10,000 MNIST digits as
per-class JSON arrays of 784 grey values in [0, 1] rounded to 3 decimals.
Values are mapped back to bytes with round(v * 255), which is lossless at
that rounding.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist10k
"""
import gzip
import json
import os
import random
import struct
import sys

N_TRAIN = 8000


def write_idx(path, dims, payload):
    header = struct.pack(">I", 0x00000800 | len(dims))
    header += b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, dst):
    samples = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        for k in range(len(flat) // 784):
            px = bytes(round(v * 255) for v in flat[k * 784:(k + 1) * 784])
            samples.append((px, digit))
    random.Random(0).shuffle(samples)
    splits = {"train": samples[:N_TRAIN], "t10k": samples[N_TRAIN:]}
    os.makedirs(dst, exist_ok=True)
    for name, part in splits.items():
        write_idx(os.path.join(dst, f"{name}-images-idx3-ubyte.gz"),
                  [len(part), 28, 28], b"".join(p for p, _ in part))
        write_idx(os.path.join(dst, f"{name}-labels-idx1-ubyte.gz"),
                  [len(part)], bytes(l for _, l in part))
        print(name, len(part))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
