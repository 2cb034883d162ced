"""Command-line entry point: ``nlsfcnn <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 validation error.
Settings resolve as flags > ``--config`` file (flat ``key=value`` lines,
keys named like the flags' long form with dashes or underscores) > defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cnn import ModelFormatError
from .image import PGM_FORMAT_VERSION, PGMError, atomic_write, load_pgm, save_pgm
from .nlsf import DEFAULT_SIGMA, NlsfConfig, auto_patch_size, nlsf
from .noise import RNG_ALGORITHM, NoiseSpec, detect, inject

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4

log = logging.getLogger("nlsfcnn")


class UsageError(Exception):
    pass


def _density(text: str) -> float:
    """Accept 0.5 or 50 (percent)."""
    v = float(text)
    return v / 100.0 if v > 1.0 else v


def _density_list(text: str) -> list[float]:
    return [_density(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _patch_size(text: str):
    return text if text == "auto" else int(text)


def _add_nlsf_flags(p, hint=True):
    if hint:
        p.add_argument("--density-hint", type=_density, default=0.5,
                       help="expected noise density (0.5 or 50); drives --patch-size auto")
    p.add_argument("--patch-size", type=_patch_size, default="auto", help="auto|3|5|7")
    p.add_argument("--radius", type=int, default=5, help="search window radius")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help="similarity kernel bandwidth")
    p.add_argument("--delta", type=int, default=1, help="impulse detection threshold (8-bit)")
    p.add_argument("--growth", type=int, default=3, help="max search window doublings")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlsfcnn", description="Salt-and-pepper denoising with NLSF + CNN")
    ap.add_argument("--version", action="store_true", help="print version and format versions")
    ap.add_argument("--config", type=Path, help="flat key=value defaults file")
    ap.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    ap.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("inject", help="add seeded salt-and-pepper noise")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--density", type=_density, required=True)
    p.add_argument("--salt-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("detect", help="write the impulse mask (255 = flagged)")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--delta", type=int, default=1)

    p = sub.add_parser("nlsf", help="non-local switching filter")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_nlsf_flags(p)

    p = sub.add_parser("train", help="train a network for one noise density")
    p.add_argument("--corpus", type=Path, required=True, help="directory of clean PGM images")
    p.add_argument("--out", type=Path, required=True, help="model file to write")
    p.add_argument("--density", type=_density, required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--momentum", type=float, default=0.9, help="sgd only")
    p.add_argument("--init", choices=("identity", "gaussian"), default="identity",
                   help="identity: pass-through path plus small noise; gaussian: small noise only")
    p.add_argument("--init-std", type=float, default=1e-3)
    p.add_argument("--input-patch", type=int, default=64)
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-log", type=Path, help="CSV of step,loss")
    _add_nlsf_flags(p, hint=False)

    p = sub.add_parser("denoise", help="NLSF pre-filter followed by the network")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--no-switch", action="store_true", help="keep network output at unflagged pixels too")
    _add_nlsf_flags(p)

    p = sub.add_parser("eval", help="PSNR between two images")
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)

    p = sub.add_parser("bench", help="PSNR table over a test set")
    p.add_argument("--testset", type=Path, required=True)
    p.add_argument("--densities", type=_density_list, default=[0.3, 0.5, 0.7])
    p.add_argument("--methods", type=lambda s: [m for m in s.split(",") if m], default=["nlsf"])
    p.add_argument("--models", type=lambda s: [Path(m) for m in s.split(",") if m], default=[],
                   help="one model file per density, in the same order")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", type=Path, help="CSV report (stdout if omitted)")
    p.add_argument("--table", type=Path, help="aligned text table")
    p.add_argument("--timings", action="store_true", help="add a wall-time column to the CSV")

    p = sub.add_parser("sweep", help="NLSF PSNR across patch sizes")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--sizes", type=_int_list, default=[3, 5, 7])
    p.add_argument("--densities", type=_density_list, default=[0.1, 0.3, 0.5, 0.7])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    return ap


def read_config(path: Path) -> dict[str, str]:
    values = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    return values


def _apply_config(sub, command, values):
    """Config values become subcommand defaults, so explicit flags still win."""
    known = {a.dest: a for a in sub._actions}
    for a in sub._actions:
        for opt in a.option_strings:
            if opt.startswith("--"):
                known[opt[2:].replace("-", "_")] = a
    defaults = {}
    for k, v in values.items():
        if k not in known:
            raise UsageError(f"unknown config key {k!r} for '{command}'")
        action = known[k]
        if action.nargs == 0:
            defaults[action.dest] = v.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[action.dest] = action.type(v) if action.type else v
            except (TypeError, ValueError):
                raise UsageError(f"bad value {v!r} for config key {k!r}") from None
        action.required = False
    sub.set_defaults(**defaults)


def _nlsf_config(args, density=None) -> NlsfConfig:
    size = args.patch_size
    if size == "auto":
        size = auto_patch_size(args.density_hint if density is None else density)
    return NlsfConfig(patch_size=size, search_radius=args.radius, sigma=args.sigma, delta=args.delta,
                      max_window_growth=args.growth)


def _resolved(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("config", "version"):
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, list):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        out[k] = v
    return out


def cmd_inject(args):
    img = load_pgm(args.input)
    spec = NoiseSpec(args.density, args.salt_fraction, args.seed)
    save_pgm(inject(img, spec), args.out)
    log.info("generator=%s seed=%d", RNG_ALGORITHM, args.seed)


def cmd_detect(args):
    mask = detect(load_pgm(args.input), args.delta)
    save_pgm(mask.astype(np.float64), args.out)
    log.info("flagged %d of %d pixels", int(mask.sum()), mask.size)


def cmd_nlsf(args):
    img = load_pgm(args.input)
    cfg = _nlsf_config(args)
    save_pgm(nlsf(img, detect(img, cfg.delta), cfg, threads=args.threads), args.out)


def cmd_train(args):
    from .cnn import TrainConfig, save_model, train, write_loss_history

    paths = sorted(args.corpus.glob("*.pgm"))
    if not paths:
        raise ValueError(f"no PGM images in {args.corpus}")
    cfg = TrainConfig(input_patch=args.input_patch, stride=args.stride, learning_rate=args.lr, steps=args.steps,
                      batch=args.batch, seed=args.seed, density=args.density, optimizer=args.optimizer,
                      momentum=args.momentum, init=args.init, init_std=args.init_std)
    model = train([load_pgm(p) for p in paths], cfg, _nlsf_config(args, args.density), threads=args.threads)
    save_model(model, args.out)
    if args.loss_log:
        write_loss_history(model.history, args.loss_log)
    if model.history:
        log.info("final minibatch loss %.6g", model.history[-1][1])


def cmd_denoise(args):
    from .cnn import denoise_image, load_model

    model = load_model(args.model)
    if abs(model.meta.density - args.density_hint) > 1e-6:
        log.warning("model was trained at density %.2f but --density-hint is %.2f; proceeding",
                    model.meta.density, args.density_hint)
    out = denoise_image(load_pgm(args.input), model, _nlsf_config(args),
                        switch_output=not args.no_switch, threads=args.threads)
    save_pgm(out, args.out)


def cmd_eval(args):
    from .evaluation import psnr

    m = psnr(load_pgm(args.reference), load_pgm(args.test))
    print(f"mse={m.mse:.6f} psnr_db={'inf' if m.is_infinite else format(m.psnr_db, '.4f')}")


def cmd_bench(args):
    from .cnn import load_model
    from .evaluation import bench

    models = {}
    if "nlsf-cnn" in args.methods:
        if len(args.models) != len(args.densities):
            raise ValueError(f"--models needs one file per density ({len(args.densities)}), "
                             f"got {len(args.models)}")
        models = {d: load_model(p) for d, p in zip(args.densities, args.models)}
    report = bench(args.testset, args.densities, args.methods, seed=args.seed, models=models,
                   repeats=args.repeats, threads=args.threads)
    text = report.to_csv(timings=args.timings)
    if args.out:
        atomic_write(args.out, text.encode())
    else:
        sys.stdout.write(text)
    if args.table:
        atomic_write(args.table, report.to_table().encode())
    log.info("\n%s", report.to_table())


def cmd_sweep(args):
    from .evaluation import patch_size_sweep

    report = patch_size_sweep(load_pgm(args.image), args.sizes, args.densities, seed=args.seed,
                              name=args.image.stem, threads=args.threads)
    text = report.to_csv()
    if args.out:
        atomic_write(args.out, text.encode())
    else:
        sys.stdout.write(text)
    log.info("\n%s", report.to_table())


COMMANDS = {"inject": cmd_inject, "detect": cmd_detect, "nlsf": cmd_nlsf, "train": cmd_train,
            "denoise": cmd_denoise, "eval": cmd_eval, "bench": cmd_bench, "sweep": cmd_sweep}


def _preload_config(parser, argv):
    """Install ``--config`` values as subcommand defaults before the real parse."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, rest = pre.parse_known_args(argv)
    if known.config is None:
        return
    command = next((a for a in rest if a in COMMANDS), None)
    if command is None:
        return
    sub = parser._subparsers._group_actions[0].choices[command]
    _apply_config(sub, command, read_config(known.config))


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _preload_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"nlsfcnn: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"nlsfcnn: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.version:
        print(f"nlsfcnn {__version__} (pgm {PGM_FORMAT_VERSION}, model magic NLSFCNN1, rng {RNG_ALGORITHM})")
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    try:
        log.info("resolved configuration: %s", json.dumps(_resolved(args), sort_keys=True))
        COMMANDS[args.command](args)
    except (OSError, PGMError, ModelFormatError) as e:
        print(f"nlsfcnn: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"nlsfcnn: invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
