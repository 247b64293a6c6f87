#!/usr/bin/env python3
"""Build IDX-format MNIST files from the digits bundled in the `mnist` npm package.

The package ships 10,000 28x28 digits as JSON (pixel values in [0, 1]). They are
written as a single pool in the standard IDX layout, gzip-compressed:

    <out>/train-images-idx3-ubyte.gz
    <out>/train-labels-idx1-ubyte.gz

Usage: scripts/fetch_mnist.py [--out data/mnist] [--tarball mnist-1.1.0.tgz]
"""

import argparse
import gzip
import io
import json
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path


def load_tarball(path):
    if path:
        return Path(path).read_bytes()
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True, capture_output=True)
        return next(Path(tmp).glob("mnist-*.tgz")).read_bytes()


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="data/mnist")
    parser.add_argument("--tarball", default=None)
    args = parser.parse_args()

    images, labels = [], []
    with tarfile.open(fileobj=io.BytesIO(load_tarball(args.tarball)), mode="r:gz") as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            data = json.load(member)["data"]
            assert len(data) % 784 == 0
            for i in range(len(data) // 784):
                px = data[i * 784:(i + 1) * 784]
                images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
                labels.append(digit)

    # interleave classes deterministically so prefixes are roughly balanced
    order = sorted(range(len(labels)), key=lambda i: ((i * 2654435761) % 4294967296, i))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(order), 28, 28))
        for i in order:
            f.write(images[i])
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(order)))
        f.write(bytes(labels[i] for i in order))
    print(f"wrote {len(order)} samples to {out}")


if __name__ == "__main__":
    main()
