"""Command-line entry point for dataset generation, training, and evaluation.

One command equals one process; every command that accepts a seed is
bit-reproducible on a single machine.  Failures map to exit codes through the
exception hierarchy: 1 usage/config, 2 data, 3 numeric, 4 state.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .config import RunConfig, describe_keys, load_config
from .data import (
    Dataset,
    class_colors_from_manifest,
    load_dataset,
    pad_to_multiple,
    parse_pose_file,
    read_manifest,
    read_ppm,
    write_dataset,
    write_pgm,
    write_ppm,
)
from .errors import ConfigError, NumericError, PoseForgeError, StateError, UsageError
from .evaluation import evaluate_scene, export_trajectory, format_report, write_report
from .geometry import Camera, Pose, normalize_quaternion_tensor
from .gradcheck import registered_modules, run_suites
from .scene import generate_scene
from .semantic_field import render_image
from .training import (
    build_field,
    build_regressor,
    load_model_blocks,
    load_regressor_checkpoint,
    run_stage1,
    run_stage2,
    run_stage3,
)

log = logging.getLogger("poseforge")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the package exit codes."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg.set(name.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", str(args.seed))
    return cfg


def _load_split(args, cfg: RunConfig) -> tuple[Dataset, Dataset]:
    data_dir = args.data or cfg.data_dir
    if not data_dir:
        raise ConfigError("no dataset directory: pass --data or set data_dir in the config")
    return load_dataset(
        data_dir,
        split_ratio=cfg.split_ratio,
        split_seed=cfg.split_seed,
        default_near=cfg.near,
        default_far=cfg.far,
    )


def _predict_pose(model, image: np.ndarray) -> Pose:
    with ad.no_grad():
        pred, _ = model(ad.constant(image))
    q = normalize_quaternion_tensor(pred.q_raw).data
    return Pose(pred.x.data.copy(), q / np.linalg.norm(q))


def predict_poses(model, dataset: Dataset, bn: str = "running") -> list[Pose]:
    """Predicted pose per sample.

    ``bn`` picks the normalization statistics: "running" is the standard
    averaged-statistics inference path; "batch" normalizes each image by its
    own statistics, which is the reliable choice when feature maps are only a
    few positions wide and per-image statistics deviate strongly from any
    running average.
    """
    if bn == "running":
        model.eval_mode()
    elif bn == "batch":
        model.train_mode()
    else:
        raise UsageError(f"unknown bn mode {bn!r}; expected 'running' or 'batch'")
    return [_predict_pose(model, s.image) for s in dataset.samples]


# -- command handlers -----------------------------------------------------------


def _cmd_gen(args) -> int:
    scene, samples = generate_scene(
        seed=args.seed,
        n_classes=args.classes,
        n_views=args.views,
        resolution=(args.height, args.width),
        grid_n=args.grid_n,
        extent=args.extent,
    )
    write_dataset(args.out, scene, samples)
    print(f"wrote {len(samples)} views ({args.height}x{args.width}, {args.classes} classes) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    train, val = _load_split(args, cfg)
    out = Path(args.out)

    if args.stage == 1:
        model, loss_state = build_regressor(cfg)
        best = run_stage1(model, loss_state, train, val, cfg, out)
        print(f"stage 1 done: best checkpoint {best}")
        return 0

    if args.stage == 2:
        field = build_field(cfg, train.n_classes, train.near, train.far)
        path = run_stage2(field, train, cfg, out)
        print(f"stage 2 done: field checkpoint {path}")
        return 0

    stage1_path = out / "stage1_best.pfck"
    if not stage1_path.exists():
        raise StateError(
            f"no stage-1 checkpoint at {stage1_path}; run `poseforge train --stage 1 --out {out}` first"
        )
    stage2_path = out / "stage2_field.pfck"
    if not stage2_path.exists():
        raise StateError(
            f"no stage-2 field checkpoint at {stage2_path}; run `poseforge train --stage 2 --out {out}` first"
        )
    model, _ = build_regressor(cfg)
    load_regressor_checkpoint(stage1_path, model)
    field = build_field(cfg, train.n_classes, train.near, train.far)
    load_model_blocks(field, load_checkpoint(stage2_path), "model")
    path = run_stage3(model, field, train, cfg, out)
    print(f"stage 3 done: refined checkpoint {path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    train, val = _load_split(args, cfg)
    subset = {"train": train, "val": val, "all": None}[args.split]
    if subset is None:
        subset = Dataset(
            name=train.name,
            samples=train.samples + val.samples,
            n_classes=train.n_classes,
            fx=train.fx,
            fy=train.fy,
            cx=train.cx,
            cy=train.cy,
            width=train.width,
            height=train.height,
            near=train.near,
            far=train.far,
        )

    model, _ = build_regressor(cfg)
    load_regressor_checkpoint(args.model, model)
    preds = predict_poses(model, subset, bn=args.bn)
    gts = [s.pose for s in subset.samples]
    metrics = evaluate_scene(subset.name, preds, gts)
    report = format_report([metrics])
    write_report(args.report, [metrics])
    if args.export_dir:
        export_trajectory(args.export_dir, preds, gts)
    print(report, end="")
    return 0


def _cmd_render(args) -> int:
    cfg = _config_from_args(args)
    man = read_manifest(Path(args.data) / "manifest.txt")
    n_classes = int(man["n_classes"])
    near = float(man["near"]) if "near" in man else cfg.near
    far = float(man["far"]) if "far" in man else cfg.far
    colors = class_colors_from_manifest(man)

    field = build_field(cfg, n_classes, near, far)
    load_model_blocks(field, load_checkpoint(args.field), "model")
    poses = parse_pose_file(args.pose_file)
    if not poses:
        raise UsageError(f"{args.pose_file}: no poses to render")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        cam = Camera(
            fx=float(man["fx"]),
            fy=float(man["fy"]),
            cx=float(man["cx"]),
            cy=float(man["cy"]),
            width=int(man["width"]),
            height=int(man["height"]),
            pose=pose,
        )
        logits, rgb = render_image(cam, field, stride=args.stride, near=near, far=far)
        labels = logits.argmax(axis=0)
        write_ppm(out / f"render_{i:04d}_rgb.ppm", np.clip(rgb, 0.0, 1.0))
        write_pgm(out / f"render_{i:04d}_labels.pgm", labels)
        write_ppm(out / f"render_{i:04d}_sem.ppm", colors[labels].transpose(2, 0, 1))
    print(f"rendered {len(poses)} poses (stride {args.stride}) to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    if args.module is not None and args.module not in registered_modules():
        raise UsageError(
            f"unknown gradcheck module {args.module!r}; available: {', '.join(registered_modules())}"
        )
    results = run_suites(args.module)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.module:<14} max_rel_err={r.max_rel_err:.3e}  tol={r.tolerance:.0e}  {status}")
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} suites passed in {total:.1f}s")
    if failed:
        raise NumericError(f"{len(failed)} gradient check suite(s) failed: {', '.join(r.name for r in failed)}")
    return 0


def _cmd_attmaps(args) -> int:
    cfg = _config_from_args(args)
    model, _ = build_regressor(cfg)
    load_regressor_checkpoint(args.model, model)
    model.eval_mode()
    image, _ = pad_to_multiple(read_ppm(args.image), None)
    with ad.no_grad():
        _, maps = model(ad.constant(image))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # Scale 3 is the deepest (/32); export() returns deepest first.
    for scale, (mat, grid) in enumerate(zip(maps.export(), maps.grids), start=0):
        path = out / f"attn_scale{3 - scale}.csv"
        np.savetxt(path, mat, delimiter=",", header=f"grid={grid[0]}x{grid[1]} head-averaged pre-softmax logits")
    print(f"wrote {len(maps.scales)} attention map CSVs to {out}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(
        prog="poseforge",
        description="Multi-scale cross-attention pose regression with semantic-field supervision.",
        epilog="config keys (for --config files and --set overrides):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="key=value config file; unknown keys are rejected")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("gen", help="generate a synthetic posed RGB + label dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--grid-n", type=int, default=32)
    p.add_argument("--extent", type=float, default=2.0)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser(
        "train",
        help="run one training stage (resumable)",
        epilog="config keys:\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--out", required=True, help="checkpoint/metrics directory shared by all stages")
    p.add_argument("--data", help="dataset directory (defaults to config data_dir)")
    add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="median translation/rotation report for a checkpoint")
    p.add_argument("--model", required=True, help="stage-1/3 model checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="report file to write")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument(
        "--bn",
        choices=("running", "batch"),
        default="running",
        help="normalization statistics at inference: averaged (standard) or per-image",
    )
    p.add_argument("--export-dir", help="also write pred/gt pose files and per-frame error CSV here")
    add_config_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render", help="render semantic/RGB images from a fitted field")
    p.add_argument("--field", required=True, help="stage-2 field checkpoint")
    p.add_argument("--pose-file", required=True, help="poses to render, one 'tx ty tz qx qy qz qw' line each")
    p.add_argument("--data", required=True, help="dataset directory providing intrinsics and class colors")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=1)
    add_config_flags(p)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all registered gradients")
    p.add_argument("--module", help="restrict to one suite group")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("attmaps", help="export per-scale attention maps as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="PPM image to inspect")
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=_cmd_attmaps)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except PoseForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
