#!/usr/bin/env python3
"""Build the desk-scale digit files shipped under data/mnist-desk/.

Produces four gzipped IDX files (5000 training and 1000 test images with
labels) from either of two sources:

  --from-idx DIR    canonical IDX files (train-images-idx3-ubyte[.gz] etc.);
                    the desk subset is drawn from the training split
  --from-json DIR   per-digit JSON files (0.json .. 9.json, each holding
                    {"data": [flat floats in 0..1]}), as distributed in the
                    `mnist` npm package

The subset is a deterministic balanced shuffle, so the output files are
reproducible byte for byte from the same source.
"""

import argparse
import gzip
import json
import shutil
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from astdp.data import load_idx, write_idx_images, write_idx_labels  # noqa: E402

TRAIN_COUNT = 5000
TEST_COUNT = 1000
SHUFFLE_SEED = 20240601


def images_from_json(src: Path):
    images, labels = [], []
    for digit in range(10):
        with open(src / f"{digit}.json") as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        pics = flat.reshape(-1, 784)
        images.append(np.floor(pics * 255.0 + 0.5).astype(np.uint8))
        labels.append(np.full(len(pics), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def images_from_idx(src: Path):
    def find(stem):
        for suffix in ("", ".gz"):
            path = src / (stem + suffix)
            if path.exists():
                return path
        raise FileNotFoundError(f"{stem}[.gz] not found in {src}")

    ds = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    return (np.floor(ds.images * 255.0 + 0.5).astype(np.uint8),
            ds.labels.astype(np.uint8))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--from-idx", type=Path)
    group.add_argument("--from-json", type=Path)
    parser.add_argument("--out", type=Path,
                        default=Path(__file__).resolve().parent.parent / "data" / "mnist-desk")
    args = parser.parse_args()

    if args.from_json:
        images, labels = images_from_json(args.from_json)
    else:
        images, labels = images_from_idx(args.from_idx)
    if len(images) < TRAIN_COUNT + TEST_COUNT:
        raise SystemExit(f"need {TRAIN_COUNT + TEST_COUNT} images, have {len(images)}")

    order = np.random.default_rng(SHUFFLE_SEED).permutation(len(images))
    train = order[:TRAIN_COUNT]
    test = order[TRAIN_COUNT : TRAIN_COUNT + TEST_COUNT]

    args.out.mkdir(parents=True, exist_ok=True)
    names = {
        "train-images-idx3-ubyte": images[train].reshape(-1, 28, 28),
        "test-images-idx3-ubyte": images[test].reshape(-1, 28, 28),
    }
    for name, data in names.items():
        raw = args.out / name
        write_idx_images(raw, data)
    write_idx_labels(args.out / "train-labels-idx1-ubyte", labels[train])
    write_idx_labels(args.out / "test-labels-idx1-ubyte", labels[test])
    for raw in sorted(args.out.glob("*-ubyte")):
        with open(raw, "rb") as fin, gzip.GzipFile(
            filename="", mode="wb", fileobj=open(f"{raw}.gz", "wb"), mtime=0
        ) as fout:
            shutil.copyfileobj(fin, fout)
        raw.unlink()
    for path in sorted(args.out.glob("*.gz")):
        print(f"{path} ({path.stat().st_size} bytes)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
