"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .autodiff import ChecksumMismatch, NonFiniteValue
from .config import ConfigError, ExperimentConfig
from .geometry import GeometryError, compute_overlap_mask, default_rig, rectify_pair
from .io import (
    FormatError,
    load_rig,
    load_scene,
    read_intensity_pgm,
    save_rig,
    save_scene,
    write_intensity_pgm,
    write_mask_pgm,
    write_pfm,
)
from .scene import InfeasiblePlacement, SceneParams, gt_disparity, render, sample_scene
from .sgm import SgmError, SgmParams, sgm_disparity

log = logging.getLogger("surround3d")

RUNTIME_ERRORS = (
    ConfigError,
    FormatError,
    GeometryError,
    SgmError,
    ChecksumMismatch,
    NonFiniteValue,
    InfeasiblePlacement,
    FloatingPointError,
    OSError,
    ValueError,
    KeyError,
)


def _thread_limit():
    raw = os.environ.get("OR3D_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"OR3D_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ConfigError("OR3D_THREADS must be >= 0")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _rig(path):
    return load_rig(path) if path else default_rig()


def cmd_gen_rig(args):
    rig = default_rig(args.cameras, args.hfov, args.width, args.height, args.ring_radius, args.mount_height)
    save_rig(args.out, rig)
    print(f"cameras={len(rig)} pairs={len(rig.adjacent_pairs)} out={args.out}")


def cmd_gen_scene(args):
    scene = sample_scene(args.seed, SceneParams(num_boxes=args.boxes))
    save_scene(args.out, scene)
    print(f"boxes={len(scene.boxes)} seed={args.seed} out={args.out}")


def cmd_render(args):
    rig, scene = _rig(args.rig), load_scene(args.scene)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.pair:
        s, t = args.pair
        mask, _ = compute_overlap_mask(rig, s, t)
        pair = rectify_pair(rig, s, t, tuple(args.crop), overlap_mask=mask.mask)
        lv, rv = render(pair.left_camera(), scene), render(pair.right_camera(), scene)
        truth = gt_disparity(pair, scene, (lv, rv))
        write_intensity_pgm(out / "left.pgm", lv.intensity)
        write_intensity_pgm(out / "right.pgm", rv.intensity)
        write_pfm(out / "gt_disparity.pfm", truth.disparity)
        print(f"pair={s},{t} baseline={pair.baseline:.6f} focal={pair.focal:.6f} valid={int(truth.valid.sum())}")
        return
    cams = range(len(rig)) if args.camera is None else [args.camera]
    for i in cams:
        view = render(rig[i], scene)
        write_intensity_pgm(out / f"cam{i}.pgm", view.intensity)
        write_pfm(out / f"cam{i}_depth.pfm", np.where(np.isfinite(view.depth), view.depth, 0.0))
        print(f"camera={i} out={out / f'cam{i}.pgm'}")


def cmd_overlap(args):
    rig = _rig(args.rig)
    s, t = args.pair
    mask, _ = compute_overlap_mask(rig, s, t, (args.depth_min, args.depth_max), args.samples)
    write_mask_pgm(args.out, mask.mask)
    print(f"fraction={mask.fraction!r}")


def cmd_sgm(args):
    left, right = read_intensity_pgm(args.left), read_intensity_pgm(args.right)
    params = SgmParams()
    if args.params:
        with open(args.params) as fh:
            params = SgmParams.from_dict(json.load(fh))
    t0 = time.perf_counter()
    dmap = sgm_disparity(left, right, args.dmax, params, args.mode)
    write_pfm(args.out, dmap.disparity)
    if args.figure:
        from .plotting import plot_disparity

        plot_disparity(dmap.disparity, dmap.valid, args.figure)
    print(f"valid={dmap.valid.mean()!r} seconds={time.perf_counter() - t0:.3f} out={args.out}")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for flag in args.ablate or ():
        if flag == "no-disparity":
            cfg.disable_disparity = True
        elif flag == "no-adversarial":
            cfg.disable_adversarial = True
    if getattr(args, "steps", None) is not None:
        cfg.steps = args.steps
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _print_report(tag, report):
    print(
        f"{tag}: epe={report.epe:.6f} bad1={report.bad1_rate:.6f} disc_acc={report.disc_accuracy:.6f} "
        f"center_err={report.center_error:.6f} base_rate={report.label_base_rate:.6f}"
    )


def cmd_train(args):
    from .plotting import plot_training_curves
    from .training import run_training

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    def progress(step, res):
        if step % max(1, cfg.steps // 10) == 0:
            log.info("step %d total=%.4f L_d=%.4f disc_acc=%.3f epe=%.3f", step, res.total, res.l_d, res.disc_acc, res.epe)

    result = run_training(cfg, out, progress=progress)
    if result.history and not args.no_plot:
        plot_training_curves(result.history, out / "curves.png", title=f"seed {cfg.seed}")
    _print_report("initial", result.initial)
    _print_report("final", result.final)
    print(f"metrics={out / 'metrics.csv'} checkpoint={out / 'checkpoint.or3d'}")


def cmd_eval(args):
    from .training import run_eval

    cfg = _load_config(args)
    _print_report("eval", run_eval(args.checkpoint, cfg))


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} rel_err={r.error:.3e}")
    failed = [r.name for r in results if not r.passed]
    print(f"cases={len(results)} failed={len(failed)}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surround3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-rig", help="write the default camera ring as JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--cameras", type=int, default=6)
    g.add_argument("--hfov", type=float, default=64.0)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--height", type=int, default=80)
    g.add_argument("--ring-radius", type=float, default=0.5)
    g.add_argument("--mount-height", type=float, default=1.5)
    g.set_defaults(func=cmd_gen_rig)

    g = sub.add_parser("gen-scene", help="sample a box scene from a seed")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--boxes", type=int, default=3)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    g = sub.add_parser("render", help="render camera views or a rectified pair")
    g.add_argument("--rig")
    g.add_argument("--scene", required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--camera", type=int)
    g.add_argument("--pair", type=int, nargs=2, metavar=("SRC", "TGT"))
    g.add_argument("--crop", type=int, nargs=2, default=(64, 80), metavar=("W", "H"))
    g.set_defaults(func=cmd_render)

    g = sub.add_parser("overlap", help="overlap mask of one camera towards another")
    g.add_argument("--rig")
    g.add_argument("--pair", type=int, nargs=2, required=True, metavar=("SRC", "TGT"))
    g.add_argument("--out", required=True)
    g.add_argument("--depth-min", type=float, default=1.0)
    g.add_argument("--depth-max", type=float, default=60.0)
    g.add_argument("--samples", type=int, default=16)
    g.set_defaults(func=cmd_overlap)

    g = sub.add_parser("sgm", help="semi-global matching on a rectified PGM pair")
    g.add_argument("--left", required=True)
    g.add_argument("--right", required=True)
    g.add_argument("--dmax", type=int, default=32)
    g.add_argument("--mode", choices=("census", "mutual_information"), default="census")
    g.add_argument("--params", help="JSON file with SGM parameters")
    g.add_argument("--out", required=True)
    g.add_argument("--figure", help="optional PNG of the disparity map")
    g.set_defaults(func=cmd_sgm)

    for name, func, hlp in (("train", cmd_train, "co-train the model"), ("eval", cmd_eval, "evaluate a checkpoint")):
        g = sub.add_parser(name, help=hlp)
        g.add_argument("--config")
        g.add_argument("--ablate", action="append", choices=("no-disparity", "no-adversarial"))
        if name == "train":
            g.add_argument("--out", required=True)
            g.add_argument("--steps", type=int)
            g.add_argument("--seed", type=int)
            g.add_argument("--no-plot", action="store_true")
        else:
            g.add_argument("--checkpoint", required=True)
        g.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            code = args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
