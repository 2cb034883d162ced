"""Regenerate the PGM fixtures under tests/data.

Sources:
  * lena.dat / ascent.dat from the scipy 0.16.1 source tarball
    (scipy/misc/*.dat, pickled integer arrays), passed as --scipy-misc DIR
  * scikit-image's bundled sample images for the training corpus

Usage:
    python scripts/make_fixtures.py --scipy-misc /tmp/scipy-0.16.1/scipy/misc
"""
import argparse
import hashlib
import pickle
from pathlib import Path

import numpy as np
import skimage.data
from skimage.color import rgb2gray
from skimage.util import img_as_ubyte

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"

# (name, loader attribute) for the 256x256 training corpus
CORPUS = [
    "astronaut", "chelsea", "coffee", "rocket", "coins", "moon",
    "brick", "grass", "gravel", "clock", "cell", "hubble_deep_field",
]


def write_pgm(path, arr):
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w = arr.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def load_dat(path):
    with open(path, "rb") as f:
        return np.asarray(pickle.load(f, encoding="latin1"))


def to_gray_u8(a):
    if a.ndim == 3:
        a = rgb2gray(a[..., :3])
    return img_as_ubyte(a)


def center_crop(a, size):
    h, w = a.shape
    top, left = (h - size) // 2, (w - size) // 2
    return a[top:top + size, left:left + size]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scipy-misc", type=Path, required=True)
    args = ap.parse_args()

    (DATA / "corpus").mkdir(parents=True, exist_ok=True)
    write_pgm(DATA / "lena.pgm", load_dat(args.scipy_misc / "lena.dat"))
    write_pgm(DATA / "camera.pgm", skimage.data.camera())
    write_pgm(DATA / "ascent.pgm", load_dat(args.scipy_misc / "ascent.dat"))

    for name in CORPUS:
        img = to_gray_u8(getattr(skimage.data, name)())
        write_pgm(DATA / "corpus" / f"{name}.pgm", center_crop(img, 256))

    lines = []
    for p in sorted(DATA.rglob("*.pgm")):
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        lines.append(f"{p.relative_to(DATA)} {digest}")
    (DATA / "MANIFEST").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
