"""Train the refinement network on the bundled corpus and apply it to Lena.

Run from the repository root (a few minutes on one core)::

    python demos/03_train_and_denoise.py [steps]
"""
# %%
import sys
import time
from pathlib import Path

from nlsfcnn import (
    CnnModel, NlsfConfig, NoiseSpec, TrainConfig, denoise_image, detect, inject, load_pgm, nlsf, psnr,
    save_model, train,
)
from nlsfcnn.cnn import write_loss_history

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"
OUT = Path("demo_output")
OUT.mkdir(exist_ok=True)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000

corpus = [load_pgm(p) for p in sorted((DATA / "corpus").glob("*.pgm"))]
print(len(corpus), "training images")

# %% [markdown]
# Each training image is corrupted, detected and pre-filtered; the network
# sees 64x64 filtered patches and learns to predict the clean 52x52 centre.
# The default start is a pass-through network, so training begins at the
# filter's own quality and only has to learn the correction.

# %%
cfg = TrainConfig(steps=steps, density=0.5, seed=0)
t0 = time.perf_counter()
model = train(corpus, cfg)
if steps:
    print(f"trained {steps} steps in {time.perf_counter() - t0:.0f} s, last loss {model.history[-1][1]:.5f}")
save_model(model, OUT / "model_d50.bin")
write_loss_history(model.history, OUT / "loss_d50.csv")

# %% [markdown]
# Lena is not in the training set.

# %%
clean = load_pgm(DATA / "lena.pgm")
noisy = inject(clean, NoiseSpec(0.5, seed=123))
filtered = nlsf(noisy, detect(noisy), NlsfConfig.for_density(0.5))
passthrough = CnnModel.identity(0, std=0.0)
passthrough.meta.density = 0.5  # picks the same pre-filter patch size as the trained model
untrained = denoise_image(noisy, passthrough)
refined = denoise_image(noisy, model)
raw = denoise_image(noisy, model, switch_output=False)
print(f"nlsf             {psnr(clean, filtered).psnr_db:.2f} dB")
print(f"pass-through net {psnr(clean, untrained).psnr_db:.2f} dB")
print(f"trained net      {psnr(clean, refined).psnr_db:.2f} dB (network output at flagged pixels)")
print(f"trained net, raw {psnr(clean, raw).psnr_db:.2f} dB (network output everywhere)")
