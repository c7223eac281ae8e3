"""Command-line entry: generate | corrupt | train | render | evaluate | validate.

Every command takes --seed / --threads / --log-level, never mutates its
inputs, and is deterministic given (seed, threads). Worker counts only change
how independent units (frames, views) are scheduled; reductions are
fixed-order, so outputs are bit-identical across thread counts.

Exit codes: 0 success, 2 config/usage error, 3 data-contract error,
4 numerical failure.
"""

from __future__ import annotations

import os

# Pin BLAS pools before numpy loads; our own --threads controls parallelism.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import config as config_mod  # noqa: E402
from . import evalkit, figures, scenegen, trainer as trainer_mod  # noqa: E402
from .errors import ConfigError, DataContractError, NumericalError  # noqa: E402
from .io import (TrainLog, load_bundle, save_bundle, write_manifest,  # noqa: E402
                 write_pfm, write_png)
from .scene_model import CameraPose  # noqa: E402

log = logging.getLogger("dygs")


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="parallel worker count (results are thread-count independent)")
    p.add_argument("--log-level", default="info",
                   choices=["debug", "info", "warning", "error"])


def build_parser():
    ap = argparse.ArgumentParser(prog="dygs", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a ground-truth scene bundle")
    p.add_argument("config", help="TOML run config ([scene] table)")
    p.add_argument("out_dir")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("corrupt", help="apply prior corruption to a bundle")
    p.add_argument("bundle_dir")
    p.add_argument("config", help="TOML run config ([corruption] table)")
    p.add_argument("out_dir")
    _add_common(p)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="optimize a scene from a bundle")
    p.add_argument("bundle_dir")
    p.add_argument("config", help="TOML run config ([train] table)")
    p.add_argument("out_dir")
    p.add_argument("--steps", type=int, default=None, help="override total step count")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint at a camera/timestep")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--out", required=True, help="output prefix (.png/.pfm)")
    p.add_argument("--frame", type=int, default=None, help="training-frame camera index")
    p.add_argument("--pose", default=None, help="explicit pose JSON file")
    p.add_argument("--t", type=int, default=None, help="timestep (defaults to --frame)")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="metrics + report figures for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("bundle_dir")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--align", choices=["refine", "nearest", "none"], default="refine")
    p.add_argument("--refine-steps", type=int, default=200)
    p.add_argument("--refine-lr-rot", type=float, default=1e-3)
    p.add_argument("--refine-lr-trans", type=float, default=1e-3)
    p.add_argument("--views", default=None,
                   help="subset of test views, e.g. '0,10,20' or '::10' slice")
    p.add_argument("--no-figures", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("validate", help="check a bundle against the schema")
    p.add_argument("bundle_dir")
    _add_common(p)
    p.set_defaults(func=cmd_validate)
    return ap


# -- commands ----------------------------------------------------------------------


def cmd_generate(args):
    doc = config_mod.load_toml(args.config)
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = config_mod.scene_config(doc, overrides)
    write_manifest(args.out_dir, "generate", config_mod.load_toml(args.config),
                   cfg.seed, inputs=[args.config], outputs=[args.out_dir])
    bundle = scenegen.generate(cfg, n_workers=args.threads)
    save_bundle(bundle, args.out_dir)
    log.info("wrote bundle with %d frames to %s", bundle.n_frames, args.out_dir)
    return 0


def cmd_corrupt(args):
    doc = config_mod.load_toml(args.config)
    corr = config_mod.corruption_config(doc)
    seed = args.seed if args.seed is not None else int(doc.get("corruption", {}).get("seed", 0))
    bundle = load_bundle(args.bundle_dir)
    write_manifest(args.out_dir, "corrupt", doc, seed,
                   inputs=[args.bundle_dir, args.config], outputs=[args.out_dir])
    out = scenegen.corrupt(bundle, corr, seed=seed)
    save_bundle(out, args.out_dir)
    log.info("wrote corrupted bundle to %s", args.out_dir)
    return 0


def cmd_train(args):
    doc = config_mod.load_toml(args.config)
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = config_mod.train_config(doc, overrides)
    bundle = load_bundle(args.bundle_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "train", doc, cfg.seed,
                   inputs=[args.bundle_dir, args.config], outputs=[str(out)])
    log_writer = TrainLog(out / "train_log.csv")
    tr = trainer_mod.Trainer(bundle, cfg)
    try:
        tr.run(n_steps=args.steps, log_writer=log_writer, checkpoint_dir=str(out))
    finally:
        log_writer.close()
    ckpt = out / "checkpoint.dygs"
    tr.save(ckpt)
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    figures.save_loss_curves(out / "train_log.csv", fig_dir / "loss_curves.png")
    log.info("trained %d iterations; checkpoint at %s", tr.iteration, ckpt)
    return 0


def _pose_from_json(path):
    rec = json.loads(Path(path).read_text())
    try:
        m = np.asarray(rec["w2c"], dtype=np.float64).reshape(4, 4)
        return CameraPose.from_matrix(m, rec["fx"], rec["fy"], rec["cx"], rec["cy"],
                                      rec["width"], rec["height"])
    except KeyError as e:
        raise ConfigError(f"pose file {path} is missing key {e}") from e


def cmd_render(args):
    model = trainer_mod.load_model(args.checkpoint)
    if (args.frame is None) == (args.pose is None):
        raise ConfigError("render needs exactly one of --frame or --pose")
    if args.frame is not None:
        if not 0 <= args.frame < len(model.cams):
            raise DataContractError(f"frame {args.frame} outside checkpoint's camera range")
        cam = model.cams[args.frame]
        t = args.t if args.t is not None else args.frame
    else:
        cam = _pose_from_json(args.pose)
        t = args.t if args.t is not None else 0
    if not 0 <= t <= model.t_max:
        raise DataContractError(f"timestep {t} outside [0, {model.t_max}]")
    out = evalkit.render_model(model, cam, t)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_png(str(prefix) + ".png", out["color"].value)
    write_pfm(str(prefix) + "_depth.pfm", out["depth"].value)
    write_pfm(str(prefix) + "_alpha.pfm", out["alpha"].value)
    log.info("rendered t=%d to %s.png", t, prefix)
    return 0


def _parse_views(spec, n):
    if spec is None:
        return None
    if ":" in spec:
        parts = [int(p) if p else None for p in spec.split(":")]
        return list(range(n))[slice(*parts)]
    return [int(p) for p in spec.split(",") if p.strip()]


def cmd_evaluate(args):
    model = trainer_mod.load_model(args.checkpoint)
    bundle = load_bundle(args.bundle_dir)
    H, W = bundle.image_hw
    cam0 = model.cams[0]
    if (cam0.width, cam0.height) != (W, H):
        raise DataContractError(
            f"checkpoint image size {cam0.width}x{cam0.height} does not match "
            f"bundle {W}x{H}")
    if len(model.cams) != bundle.n_frames:
        raise DataContractError("checkpoint camera count does not match bundle frames")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "evaluate", {"align": args.align,
                                     "refine_steps": args.refine_steps},
                   args.seed or 0,
                   inputs=[args.checkpoint, args.bundle_dir], outputs=[str(out)])
    subset = _parse_views(args.views, len(bundle.test_views))
    result, renders = evalkit.evaluate_model(
        model, bundle, align=args.align, refine_steps=args.refine_steps,
        view_subset=subset, n_workers=args.threads,
        lr_rot=args.refine_lr_rot, lr_trans=args.refine_lr_trans)

    with open(out / "metrics.json", "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "metrics.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["t", "psnr", "ssim"])
        for v in result["views"]:
            wr.writerow([v["t"], f"{v['psnr']:.6f}", f"{v['ssim']:.6f}"])

    if not args.no_figures:
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        by_t = {v.t: v.image for v in bundle.test_views}
        pairs = [(t, img, by_t[t]) for t, img in renders if t in by_t]
        figures.save_view_grid(pairs, fig_dir / "view_grid.png")
        figures.save_psnr_per_view(result["views"], fig_dir / "psnr_per_view.png")
        if "trajectory" in result:
            figures.save_trajectory_plot(model.cams, bundle.cam_gt,
                                         result["trajectory"]["alignment"],
                                         fig_dir / "trajectory.png")
    log.info("evaluation done: PSNR %.2f dB over %d views",
             result["psnr_mean"] or float("nan"), result["n_views"])
    return 0


def cmd_validate(args):
    bundle = load_bundle(args.bundle_dir)  # load performs schema+invariant checks
    masks = bundle.masks
    if masks.dtype != bool:
        raise DataContractError("masks must be binary")
    print(f"ok: {bundle.n_frames} frames, {bundle.image_hw[1]}x{bundle.image_hw[0]}, "
          f"{len(bundle.test_views)} test views")
    return 0


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return 2
    except DataContractError as e:
        log.error("%s", e)
        return 3
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return 4
    except FileNotFoundError as e:
        log.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
