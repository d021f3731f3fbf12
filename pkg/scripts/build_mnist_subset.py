#!/usr/bin/env python3
"""Build IDX files from the 10,000 MNIST digits bundled in the npm ``mnist`` package.

Use this when the official MNIST files cannot be downloaded. The package
stores pixel/255 rounded to three decimals, which round-trips exactly back
to the original uint8 pixels. Digits are split per class (seeded shuffle)
into train and test sets and written with the official file names.

    npm pack mnist@1.1.0
    python scripts/build_mnist_subset.py mnist-1.1.0.tgz data/mnist
"""

import argparse
import io
import json
import tarfile
from pathlib import Path

import numpy as np

from defapprox.data import MNIST_FILES, write_idx


def read_digits(source):
    source = Path(source)
    digits = {}
    if source.is_dir():
        for d in range(10):
            digits[d] = json.loads((source / "src" / "digits" / f"{d}.json").read_text())["data"]
    else:
        with tarfile.open(source) as tar:
            for d in range(10):
                member = tar.extractfile(f"package/src/digits/{d}.json")
                digits[d] = json.load(io.TextIOWrapper(member))["data"]
    images, labels = [], []
    for d in range(10):
        scaled = np.asarray(digits[d], dtype=np.float64).reshape(-1, 28, 28)
        pixels = np.rint(scaled * 255.0)
        if np.abs(pixels / 255.0 - scaled).max() > 5e-4:
            raise ValueError(f"digit {d}: values are not pixel/255 rounded to 3 decimals")
        images.append(pixels.astype(np.uint8))
        labels.append(np.full(len(pixels), d, dtype=np.uint8))
    return images, labels


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("source", help="npm mnist package tarball or extracted package directory")
    parser.add_argument("out_dir")
    parser.add_argument("--test-fraction", type=float, default=0.2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = read_digits(args.source)
    rng = np.random.default_rng(args.seed)
    split = {"train": ([], []), "test": ([], [])}
    for imgs, labs in zip(images, labels):
        order = rng.permutation(len(imgs))
        n_test = int(round(len(imgs) * args.test_fraction))
        for name, idx in (("test", order[:n_test]), ("train", order[n_test:])):
            split[name][0].append(imgs[idx])
            split[name][1].append(labs[idx])

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, (imgs, labs) in split.items():
        x = np.concatenate(imgs)
        y = np.concatenate(labs)
        order = rng.permutation(len(y))
        img_file, lab_file = MNIST_FILES[name]
        write_idx(out / f"{img_file}.gz", x[order])
        write_idx(out / f"{lab_file}.gz", y[order])
        print(f"{name}: {len(y)} images -> {out}")


if __name__ == "__main__":
    main()
