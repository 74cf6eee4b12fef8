#!/usr/bin/env python3
"""Build the MNIST subset under data/mnist from the JSON digit files of the
`mnist` npm package (src/digits/0.json .. 9.json, 784 floats per image).

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist

The 10,000 images are shuffled with a fixed seed; the first 5,000 form the
training split and the next 1,000 the held-out split.
"""
import json
import struct
import sys
from pathlib import Path

import numpy as np

TRAIN, TEST, SEED = 5000, 1000, 0


def write_images(path, images):
    n = images.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        data = np.asarray(json.loads((Path(src) / f"{digit}.json").read_text())["data"], dtype=np.float64)
        data = data.reshape(-1, 784)
        images.append(np.rint(np.clip(data, 0.0, 1.0) * 255.0))
        labels.extend([digit] * data.shape[0])
    images = np.concatenate(images)
    labels = np.asarray(labels)
    order = np.random.RandomState(SEED).permutation(len(labels))
    train, test = order[:TRAIN], order[TRAIN:TRAIN + TEST]
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "train-images-idx3-ubyte", images[train])
    write_labels(out / "train-labels-idx1-ubyte", labels[train])
    write_images(out / "test-images-idx3-ubyte", images[test])
    write_labels(out / "test-labels-idx1-ubyte", labels[test])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
