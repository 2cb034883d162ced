"""Corrupt a test image with salt-and-pepper noise and clean it with NLSF.

Run from the repository root::

    python demos/01_noise_and_filter.py
"""
# %%
from pathlib import Path

import numpy as np

from nlsfcnn import NlsfConfig, NoiseSpec, detect, inject, load_pgm, nlsf, psnr, save_pgm
from nlsfcnn.evaluation import switching_median

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"
OUT = Path("demo_output")
OUT.mkdir(exist_ok=True)

clean = load_pgm(DATA / "lena.pgm")
print("image", clean.shape, "range", clean.min(), clean.max())

# %% [markdown]
# Noise is drawn per pixel: with probability ``density`` a pixel becomes 0
# or 255 (even odds).  The detector simply flags the two extreme values.

# %%
noisy = inject(clean, NoiseSpec(density=0.5, seed=1))
mask = detect(noisy)
print(f"flagged {mask.mean():.3f} of pixels (target density 0.5)")

# clean pixels that happen to be 0 or 255 would also be flagged
print("clean extremes:", int(((clean == 0) | (clean == 1)).sum()))

# %% [markdown]
# A switching median and NLSF both leave unflagged pixels alone.  NLSF
# replaces each flagged pixel by a weighted average of patch medians from
# its neighbourhood, weighting patches by how well they match.

# %%
for density in (0.3, 0.5, 0.7):
    noisy = inject(clean, NoiseSpec(density, seed=1))
    mask = detect(noisy)
    med = switching_median(noisy, mask)
    cfg = NlsfConfig.for_density(density)
    out = nlsf(noisy, mask, cfg)
    assert np.array_equal(out[~mask], noisy[~mask])
    print(f"{density:.0%}  noisy {psnr(clean, noisy).psnr_db:5.2f}  median {psnr(clean, med).psnr_db:5.2f}"
          f"  nlsf(L={cfg.patch_size}) {psnr(clean, out).psnr_db:5.2f} dB")
    save_pgm(noisy, OUT / f"lena_noisy_{int(density * 100)}.pgm")
    save_pgm(out, OUT / f"lena_nlsf_{int(density * 100)}.pgm")

# %% [markdown]
# Looking inside one restoration: the candidate medians and their weights.

# %%
from nlsfcnn.nlsf import restore_details

noisy = inject(clean, NoiseSpec(0.5, seed=1))
mask = detect(noisy)
r, c = map(int, np.argwhere(mask)[1000])
medians, weights = restore_details(noisy, mask, (r, c), NlsfConfig(5))
top = np.argsort(weights)[::-1][:5]
print(f"pixel ({r}, {c}): {len(medians)} candidates, true value {clean[r, c]:.3f}")
for k in top:
    print(f"  median {medians[k]:.3f}  weight {weights[k]:.3f}")
print("estimate", float(weights @ medians))
