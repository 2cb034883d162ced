"""PSNR and the benchmark harness (per-image tables, patch-size sweeps)."""
from __future__ import annotations

import csv
import io
import math
import time
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import load_pgm, to_uint8
from .nlsf import NlsfConfig, _pad, global_fallback, nlsf
from .noise import NoiseSpec, derive_seed, detect, inject

METHODS = ("noisy", "median", "nlsf", "nlsf-cnn")


@dataclass(frozen=True)
class Metrics:
    mse: float
    psnr_db: float  # math.inf when the images are identical

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.psnr_db)


def psnr(reference: np.ndarray, test: np.ndarray) -> Metrics:
    """PSNR of two images after 8-bit quantization: ``10 log10(255^2 / MSE)``."""
    reference, test = np.asarray(reference), np.asarray(test)
    if reference.shape != test.shape:
        raise ValueError(f"dimension mismatch: {reference.shape} vs {test.shape}")
    d = to_uint8(reference).astype(np.float64) - to_uint8(test).astype(np.float64)
    return psnr_from_mse(float(np.mean(d * d)))


def psnr_from_mse(mse: float) -> Metrics:
    if mse < 0:
        raise ValueError("mse must be non-negative")
    return Metrics(mse, math.inf if mse == 0 else 10.0 * math.log10(255.0 ** 2 / mse))


def switching_median(img: np.ndarray, mask: np.ndarray, max_radius: int = 3) -> np.ndarray:
    """Replace flagged pixels by the median of unflagged neighbours.

    The window grows from 3x3 up to ``2*max_radius+1`` until it holds an
    unflagged pixel; otherwise the global unflagged median is used.  Sanity
    baseline only.
    """
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    out = img.copy()
    todo = mask.copy()
    clean = np.where(mask, np.nan, img)
    for r in range(1, max_radius + 1):
        if not todo.any():
            break
        win = sliding_window_view(_pad(clean, r), (2 * r + 1, 2 * r + 1))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(win[todo].reshape(-1, (2 * r + 1) ** 2), axis=1)
        ok = ~np.isnan(med)
        rows, cols = np.nonzero(todo)
        out[rows[ok], cols[ok]] = med[ok]
        todo[rows[ok], cols[ok]] = False
    out[todo] = global_fallback(img, mask)
    return out


@dataclass(frozen=True)
class BenchRow:
    image: str
    density: float
    method: str
    psnr_db: float
    seconds: float = 0.0


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def sorted(self) -> "BenchReport":
        return BenchReport(sorted(self.rows, key=lambda r: (r.image, r.density, r.method)))

    def aggregates(self) -> dict[tuple[float, str], float]:
        """Mean PSNR per (density, method)."""
        groups = defaultdict(list)
        for r in self.rows:
            groups[(r.density, r.method)].append(r.psnr_db)
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    def to_csv(self, timings: bool = False) -> str:
        """Per-image rows followed by ``AVERAGE`` rows.

        Wall time is left out unless ``timings`` is set, so reruns with the
        same seed give byte-identical reports.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["image", "density", "method", "psnr_db"] + (["seconds"] if timings else [])
        w.writerow(head)
        for r in self.sorted().rows:
            w.writerow([r.image, f"{r.density:g}", r.method, _fmt(r.psnr_db)]
                       + ([f"{r.seconds:.3f}"] if timings else []))
        for (d, m), v in self.aggregates().items():
            w.writerow(["AVERAGE", f"{d:g}", m, _fmt(v)] + ([""] if timings else []))
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table: one line per (image, density), one column per method."""
        methods = sorted({r.method for r in self.rows}, key=_method_order)
        cells = {(r.image, r.density, r.method): r.psnr_db for r in self.rows}
        keys = sorted({(r.image, r.density) for r in self.rows})
        lines = ["%-16s %6s " % ("image", "level") + " ".join("%10s" % m for m in methods)]
        for img, d in keys:
            vals = " ".join("%10s" % _fmt(cells.get((img, d, m), math.nan), 2) for m in methods)
            lines.append("%-16s %5.0f%% %s" % (img[:16], 100 * d, vals))
        agg = self.aggregates()
        for d in sorted({d for _, d in keys}):
            vals = " ".join("%10s" % _fmt(agg.get((d, m), math.nan), 2) for m in methods)
            lines.append("%-16s %5.0f%% %s" % ("Average", 100 * d, vals))
        return "\n".join(lines) + "\n"


def _method_order(m):
    return (METHODS.index(m), m) if m in METHODS else (len(METHODS), m)


def _fmt(v, digits=4):
    if math.isinf(v):
        return "inf"
    return f"{v:.{digits}f}"


def load_testset(testset) -> dict[str, np.ndarray]:
    """Images keyed by name, from a directory of PGM files or a mapping."""
    if isinstance(testset, dict):
        images = dict(testset)
    else:
        paths = sorted(Path(testset).glob("*.pgm"))
        images = {p.stem: load_pgm(p) for p in paths}
    if not images:
        raise ValueError(f"no test images found in {testset}")
    return images


def run_method(method, noisy, nlsf_cfg, model=None, threads=None):
    from .cnn import denoise_image  # the network is only needed for nlsf-cnn

    if method == "noisy":
        return noisy
    mask = detect(noisy, nlsf_cfg.delta)
    if method == "median":
        return switching_median(noisy, mask)
    if method == "nlsf":
        return nlsf(noisy, mask, nlsf_cfg, threads=threads)
    if method == "nlsf-cnn":
        return denoise_image(noisy, model, nlsf_cfg, threads=threads)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def bench(testset, densities, methods=("nlsf",), seed: int = 0, models=None, repeats: int = 1,
          nlsf_cfg: NlsfConfig | None = None, threads=None) -> BenchReport:
    """PSNR of every method on every image at every density.

    Each image is corrupted with a seed derived from ``seed`` and its name, so
    adding images leaves existing rows unchanged.  ``models`` maps density
    to a trained network (required for ``nlsf-cnn``).  ``nlsf_cfg=None``
    picks the patch size from the density.
    """
    images = load_testset(testset)
    models = models or {}
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    if "nlsf-cnn" in methods:
        missing = [d for d in densities if d not in models]
        if missing:
            raise ValueError(f"no nlsf-cnn model for densities {missing}")
    report = BenchReport()
    for name, clean in sorted(images.items()):
        for d in densities:
            cfg = nlsf_cfg or NlsfConfig.for_density(d)
            noisy = [inject(clean, NoiseSpec(d, seed=derive_seed(seed, name, r))) for r in range(repeats)]
            for method in methods:
                t0 = time.perf_counter()
                scores = [psnr(clean, run_method(method, n, cfg, models.get(d), threads)).psnr_db for n in noisy]
                report.rows.append(BenchRow(name, d, method, float(np.mean(scores)),
                                            (time.perf_counter() - t0) / repeats))
    return report.sorted()


def patch_size_sweep(image: np.ndarray, sizes=(3, 5, 7), densities=(0.1, 0.3, 0.5, 0.7), seed: int = 0,
                     name: str = "image", nlsf_cfg: NlsfConfig | None = None, threads=None) -> BenchReport:
    """NLSF-only PSNR for each (patch size, density); method column is ``nlsf-L<size>``."""
    base = nlsf_cfg or NlsfConfig()
    report = BenchReport()
    for d in densities:
        noisy = inject(image, NoiseSpec(d, seed=derive_seed(seed, name, 0)))
        mask = detect(noisy, base.delta)
        for size in sizes:
            cfg = NlsfConfig(size, base.search_radius, base.sigma, base.delta, base.max_window_growth)
            t0 = time.perf_counter()
            out = nlsf(noisy, mask, cfg, threads=threads)
            report.rows.append(BenchRow(name, d, f"nlsf-L{size}", psnr(image, out).psnr_db,
                                        time.perf_counter() - t0))
    return report.sorted()
