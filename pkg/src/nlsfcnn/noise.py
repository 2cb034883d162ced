"""Salt-and-pepper corruption and impulse detection.

Corruption draws from numpy's Philox counter-based generator, so a
``(seed, image shape)`` pair fully determines the pattern.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .image import to_uint8

RNG_ALGORITHM = "numpy.random.Philox-4x64-10"


@dataclass(frozen=True)
class NoiseSpec:
    density: float
    salt_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.density <= 1.0:
            raise ValueError(f"density must lie in [0, 1], got {self.density}")
        if not 0.0 <= self.salt_fraction <= 1.0:
            raise ValueError(f"salt_fraction must lie in [0, 1], got {self.salt_fraction}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(master: int, *keys) -> int:
    """Stable 64-bit child seed for ``keys`` under ``master`` (blake2b)."""
    text = ":".join([str(master), *map(str, keys)]).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def corruption_pattern(shape, spec: NoiseSpec):
    """Boolean planes ``(corrupted, salt)`` that :func:`inject` applies."""
    g = rng(spec.seed)
    corrupted = g.random(shape) < spec.density
    salt = g.random(shape) < spec.salt_fraction
    return corrupted, salt


def inject(img: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    corrupted, salt = corruption_pattern(img.shape, spec)
    out = img.copy()
    out[corrupted & salt] = 1.0
    out[corrupted & ~salt] = 0.0
    return out


def detect(img: np.ndarray, delta: int = 1) -> np.ndarray:
    """Flag pixels whose 8-bit value lies in ``[0, delta)`` or ``(255 - delta, 255]``."""
    if not 1 <= int(delta) <= 127 or int(delta) != delta:
        raise ValueError(f"delta must be an integer in [1, 127], got {delta}")
    v = to_uint8(img).astype(np.int32)
    return (v <= delta - 1) | (v >= 256 - delta)
