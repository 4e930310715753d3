#!/usr/bin/env python3
"""Write scikit-learn's bundled 8x8 digits as MNIST-style IDX files.

The digits are bilinearly upsampled (default 16x16) and quantised to
bytes, so the rest of the pipeline reads them exactly like real MNIST.
Point the generator at genuine MNIST IDX files instead if you have them.

Usage:
  python scripts/make_digits_idx.py --out data --size 16
"""
import argparse
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

from straighten.datagen import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data")
    ap.add_argument("--size", type=int, default=16)
    args = ap.parse_args()
    digits = load_digits()
    imgs = digits.images / 16.0
    f = args.size / imgs.shape[1]
    big = np.stack([zoom(im, f, order=1, mode="nearest", grid_mode=True) for im in imgs])
    big = np.clip(np.rint(big * 255), 0, 255).astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "digits-images-idx3-ubyte", big)
    write_idx(out / "digits-labels-idx1-ubyte", digits.target.astype(np.uint8))
    print(f"wrote {len(big)} images of {big.shape[1]}x{big.shape[2]} to {out}")


if __name__ == "__main__":
    main()
