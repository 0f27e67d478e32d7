"""Command-line driver: ``splatsr {synth,train-lr,train-sr,render,eval,trace}``.

Exit status is 0 on success, 1 on a usage error and 2 when the input data
is bad (unreadable files, parse errors, invalid configuration).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from ._validation import (
    ConfigError,
    InconsistentStateError,
    InvalidParameterError,
    ParseError,
)
from .data import lr_camera, make_dataset
from .metrics import evaluate
from .render import rasterize
from .scene import make_synthetic_scene
from .train import make_oracles, train_lr, train_sr, trace_gradients

logger = logging.getLogger("splatsr")

METRICS_HEADER = ["view", "psnr", "ssim"]
TRACE_SUMMARY_HEADER = ["arm", "anneal", "iterations", "grad_mean_mean", "grad_mean_std", "cv"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# dataset directory layout


def _image_dir_write(images, directory: Path) -> None:
    for i, img in enumerate(images):
        io.ppm_write(np.clip(img, 0.0, 1.0), directory / f"{i:03d}.ppm")


def _image_dir_read(directory: Path, count: int) -> list[np.ndarray]:
    return [io.ppm_read(directory / f"{i:03d}.ppm") for i in range(count)]


def _load_views(data: Path, split: str):
    """HR cameras of a split with their HR targets, plus the matching LR views."""
    cams = io.cameras_read(data / f"cameras_{split}.txt")
    hr_imgs = _image_dir_read(data / f"{split}_hr", len(cams))
    hr = [c.with_target(img) for c, img in zip(cams, hr_imgs)]
    lr_dir = data / f"{split}_lr"
    lr = []
    if lr_dir.is_dir():
        for c, img in zip(cams, _image_dir_read(lr_dir, len(cams))):
            factor = c.width // img.shape[1]
            if factor < 1 or img.shape[1] * factor != c.width or img.shape[0] * factor != c.height:
                raise InvalidParameterError(f"LR image {img.shape[1]}x{img.shape[0]} does not divide "
                                            f"camera size {c.width}x{c.height}")
            lr.append(lr_camera(c, factor).with_target(img))
    return hr, lr


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg):
    ds = make_dataset(seed=args.seed, n_prims=args.n_prims, n_views=args.n_views, n_test=args.n_test,
                      lr_size=args.lr_size, sr_factor=cfg.sr_factor, background=cfg.background,
                      workers=cfg.workers)
    out = Path(args.out)
    io.ply_write(ds.gt, out / "gt.ply")
    io.cameras_write(ds.train_hr, out / "cameras_train.txt")
    io.cameras_write(ds.test_hr, out / "cameras_test.txt")
    _image_dir_write([c.target_image for c in ds.train_hr], out / "train_hr")
    _image_dir_write([c.target_image for c in ds.train_lr], out / "train_lr")
    _image_dir_write([c.target_image for c in ds.test_hr], out / "test_hr")
    logger.info("wrote %d training and %d test views to %s", len(ds.train_hr), len(ds.test_hr), out)


def _write_telemetry(path, rows):
    if path:
        io.write_telemetry(rows, path)


def cmd_train_lr(args, cfg):
    _, views = _load_views(Path(args.data), "train")
    init = make_synthetic_scene(args.seed + 1000, args.init_prims, 1.0)
    scene = train_lr(init, views, cfg)
    io.ply_write(scene, args.out)
    logger.info("LR scene with %d primitives written to %s", len(scene), args.out)


def _sr_config(args, cfg):
    if args.prior:
        cfg = cfg.with_(prior=args.prior)
    if args.sigma_p is not None:
        cfg = cfg.with_(sigma_p=args.sigma_p)
    if args.no_dropout or args.vanilla_sds:
        cfg = cfg.with_(dropout=False)
    if args.no_anneal or args.vanilla_sds:
        cfg = cfg.with_(anneal=False)
    return cfg


def cmd_train_sr(args, cfg):
    cfg = _sr_config(args, cfg)
    hr, lr = _load_views(Path(args.data), "train")
    init = io.ply_read(args.init)
    oracles = make_oracles(lr, cfg, [v.target_image for v in hr])
    scene, rows = train_sr(init, lr, oracles, cfg)
    io.ply_write(scene, args.out)
    _write_telemetry(args.telemetry, rows)
    logger.info("SR scene with %d primitives written to %s", len(scene), args.out)


def cmd_render(args, cfg):
    scene = io.ply_read(args.scene)
    cams = io.cameras_read(args.cameras)
    out = Path(args.out)
    images = []
    for cam in cams:
        if args.scale != 1:
            cam = cam.scaled(args.scale)
        images.append(rasterize(scene, cam, background=cfg.background, workers=cfg.workers)[0])
    _image_dir_write(images, out)


def cmd_eval(args, cfg):
    scene = io.ply_read(args.scene)
    test_hr, _ = _load_views(Path(args.data), "test")
    rows = []
    for i, view in enumerate(test_hr):
        img = np.clip(rasterize(scene, view, background=cfg.background, workers=cfg.workers)[0], 0, 1)
        rep = evaluate(img, view.target_image)
        rows.append([i, repr(rep.psnr_db), repr(rep.ssim)])
    io.atomic_write(args.out, io.csv_bytes(METRICS_HEADER, rows))


def cmd_trace(args, cfg):
    cfg = _sr_config(args, cfg)
    hr, lr = _load_views(Path(args.data), "train")
    init = io.ply_read(args.init)
    oracles = make_oracles(lr, cfg, [v.target_image for v in hr])
    out = Path(args.out)
    iterations = args.iters
    summary = []
    runs = [("mse", cfg.anneal, trace_gradients(init, lr, oracles, cfg, ("mse",), iterations)["mse"])]
    for anneal in (False, True):
        res = trace_gradients(init, lr, oracles, cfg.with_(anneal=anneal), ("sds",), iterations)["sds"]
        runs.append(("sds", anneal, res))
    for arm, anneal, (rows, cv) in runs:
        name = arm if arm == "mse" else f"sds_{'annealed' if anneal else 'vanilla'}"
        io.write_telemetry(rows, out / f"telemetry_{name}.csv")
        g = np.array([r.grad_mean for r in rows])
        summary.append([name, str(anneal).lower(), len(rows), repr(float(g.mean())), repr(float(g.std())),
                        repr(cv)])
    io.atomic_write(out / "summary.csv", io.csv_bytes(TRACE_SUMMARY_HEADER, summary))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--workers", type=int, default=None, help="renderer threads")
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="splatsr", description="Gaussian splatting super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-prims", type=int, default=300)
    p.add_argument("--n-views", type=int, default=8)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--lr-size", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-lr", parents=[common], help="fit a scene to the low-resolution views")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-prims", type=int, default=50)
    p.set_defaults(func=cmd_train_lr)

    def sr_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--init", required=True, help="PLY scene to start from")
        p.add_argument("--prior", choices=("perfect", "noisy", "bicubic"))
        p.add_argument("--sigma-p", type=float)
        p.add_argument("--no-dropout", action="store_true")
        p.add_argument("--no-anneal", action="store_true")
        p.add_argument("--vanilla-sds", action="store_true", help="same as --no-dropout --no-anneal")

    p = sub.add_parser("train-sr", parents=[common], help="super-resolve a scene with MSE + SDS")
    sr_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--telemetry", help="per-iteration CSV")
    p.set_defaults(func=cmd_train_sr)

    p = sub.add_parser("render", parents=[common], help="render a PLY scene to PPM images")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=1, help="integer resolution multiplier")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM over the held-out views")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", parents=[common], help="gradient telemetry for MSE and SDS arms")
    sr_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.set_defaults(func=cmd_trace, prior="noisy", sigma_p=0.5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = [f"seed={args.seed}", *args.set]
        if args.workers is not None:
            overrides.append(f"workers={args.workers}")
        cfg = io.parse_config(args.config, overrides)
        args.func(args, cfg)
    except (ParseError, ConfigError, InvalidParameterError, InconsistentStateError, OSError) as exc:
        print(f"splatsr: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
