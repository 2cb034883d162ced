"""Salt-and-pepper denoising: a non-local switching filter followed by a small CNN."""
from .image import extract_patches, load_pgm, mirror_pad, reconstruct, save_pgm
from .noise import NoiseSpec, detect, inject
from .nlsf import NlsfConfig, nlsf
from .cnn import CnnModel, TrainConfig, denoise_image, load_model, save_model, train
from .evaluation import bench, patch_size_sweep, psnr

__version__ = "0.1.0"

__all__ = [
    "CnnModel", "NlsfConfig", "NoiseSpec", "TrainConfig", "bench", "denoise_image", "detect",
    "extract_patches", "inject", "load_model", "load_pgm", "mirror_pad", "nlsf", "patch_size_sweep",
    "psnr", "reconstruct", "save_model", "save_pgm", "train",
]
