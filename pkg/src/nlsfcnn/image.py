"""Grayscale images, binary PGM I/O, mirror padding and patch grids.

Images are plain 2-D ``float64`` arrays of shape ``(height, width)`` with
intensities in ``[0, 1]``.  8-bit values map to ``byte / 255``; writing back
rounds half-up and clamps, so load-then-save of an 8-bit file is exact.
"""
from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PGM_FORMAT_VERSION = "P5/maxval-255"


class PGMError(ValueError):
    """Base class for PGM parsing failures."""


class PGMHeaderError(PGMError):
    pass


class PGMMaxvalError(PGMError):
    pass


class PGMTruncatedError(PGMError):
    pass


def as_image(a) -> np.ndarray:
    """Validate and return ``a`` as a 2-D float64 intensity plane."""
    img = np.asarray(a, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if img.size == 0:
        raise ValueError("empty image")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("intensities must be finite and lie in [0, 1]")
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize intensities to bytes: round half-up, then clamp to 0..255."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(a) -> np.ndarray:
    return np.asarray(a, dtype=np.uint8).astype(np.float64) / 255.0


# header tokens are separated by whitespace; '#' starts a comment running to end of line
_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def _parse_header(data: bytes):
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PGMHeaderError("malformed PGM header: missing fields")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic != b"P5":
        raise PGMHeaderError(f"malformed PGM header: bad magic {magic!r}, expected b'P5'")
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PGMHeaderError("malformed PGM header: non-integer field") from None
    if width <= 0 or height <= 0:
        raise PGMHeaderError(f"malformed PGM header: bad dimensions {width}x{height}")
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PGMHeaderError("malformed PGM header: no whitespace after maxval")
    return width, height, maxval, pos + 1


def load_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, maxval, offset = _parse_header(data)
    if maxval != 255:
        raise PGMMaxvalError(f"unsupported maxval {maxval} (only 255 is supported)")
    n = width * height
    payload = data[offset:offset + n]
    if len(payload) < n:
        raise PGMTruncatedError(f"truncated PGM payload: expected {n} bytes, got {len(payload)}")
    return from_uint8(np.frombuffer(payload, dtype=np.uint8).reshape(height, width))


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + to_uint8(img).tobytes()


def atomic_write(path, payload: bytes) -> None:
    """Write ``payload`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    atomic_write(path, pgm_bytes(img))


def mirror_pad(img: np.ndarray, margin: int) -> np.ndarray:
    """Reflect ``margin`` pixels on every side, without repeating the edge pixel."""
    img = np.asarray(img)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if margin >= min(img.shape):
        raise ValueError(f"margin {margin} too large for image of shape {img.shape}")
    return np.pad(img, margin, mode="reflect")


def crop(img: np.ndarray, margin: int) -> np.ndarray:
    if margin == 0:
        return img
    return img[margin:-margin, margin:-margin]


def grid_starts(length: int, patch_size: int, stride: int) -> list[int]:
    """Patch origins along one axis; the last one is clamped to touch the border."""
    starts = list(range(0, length - patch_size + 1, stride))
    if starts[-1] != length - patch_size:
        starts.append(length - patch_size)
    return starts


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    origins: list[tuple[int, int]]
    patches: np.ndarray  # (n, patch_size, patch_size)

    def __len__(self):
        return len(self.origins)


def patch_origins(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if patch_size < 1 or patch_size > min(height, width):
        raise ValueError(f"patch size {patch_size} does not fit a {height}x{width} image")
    return [(r, c) for r in grid_starts(height, patch_size, stride)
            for c in grid_starts(width, patch_size, stride)]


def extract_patches(img: np.ndarray, patch_size: int, stride: int) -> PatchGrid:
    img = np.asarray(img, dtype=np.float64)
    origins = patch_origins(*img.shape, patch_size, stride)
    patches = np.stack([img[r:r + patch_size, c:c + patch_size] for r, c in origins])
    return PatchGrid(patch_size, stride, origins, patches)


def reconstruct(grid: PatchGrid, out_width: int, out_height: int) -> np.ndarray:
    """Average overlapping patches back into an ``out_height x out_width`` image."""
    k = grid.patch_size
    acc = np.zeros((out_height, out_width))
    count = np.zeros((out_height, out_width), dtype=np.int64)
    lo = np.full((out_height, out_width), np.inf)
    hi = np.full((out_height, out_width), -np.inf)
    for (r, c), patch in zip(grid.origins, grid.patches):
        if r < 0 or c < 0 or r + k > out_height or c + k > out_width:
            raise ValueError(f"patch origin {(r, c)} out of bounds for {out_height}x{out_width}")
        win = np.s_[r:r + k, c:c + k]
        acc[win] += patch
        count[win] += 1
        np.minimum(lo[win], patch, out=lo[win])
        np.maximum(hi[win], patch, out=hi[win])
    if np.any(count == 0):
        raise ValueError("some output pixels are not covered by any patch")
    # a float sum of n equal values divided by n need not give the value back
    out = np.where(lo == hi, lo, acc / np.maximum(count, 1))
    return np.clip(out, 0.0, 1.0)
