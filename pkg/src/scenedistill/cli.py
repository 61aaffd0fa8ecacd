"""Command-line entry point for the full pipeline.

Subcommands: ``synth`` (generate a synthetic scene), ``pairs`` (sliding
window pair list), ``align`` (fuse pairwise teacher maps into world
pointmaps), ``train``, ``eval``, ``ablate``, ``export-ply`` and ``info``.

Exit codes: 0 success, 1 domain error, 2 usage error. Diagnostics go to
stderr; machine-readable output goes to files under ``--out`` or to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import PointMap, export_ply, global_align, save_pointmap
from .checkpoint import checkpoint_param_count, load_checkpoint, read_header, save_checkpoint
from .dataset import (
    SynthSpec,
    generate_pairs,
    load_pair_list,
    load_pair_predictions,
    load_scene,
    split,
    synth_pair_predictions,
    synth_scene,
    write_scene_dir,
)
from .errors import ConfigError, SceneDistillError
from .models import param_count
from .tensor import Tensor
from .training import (
    TrainConfig,
    ablate,
    apply_overrides,
    evaluate,
    train,
    train_config_from_dict,
    train_report_dict,
)
from . import reporting

logger = logging.getLogger("scenedistill")


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigError(f"resolution must look like 64x64, got {text!r}") from exc


def _resolve_scene(args) -> Path:
    scene = args.scene_flag if args.scene_flag is not None else args.scene
    if scene is None:
        raise ConfigError("a scene directory is required (positional or --scene)")
    return Path(scene)


def _load_config_file(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _train_config_from_args(args) -> tuple[TrainConfig, dict]:
    """Merge config file (if any) with flag overrides; flags win.

    Returns the resolved config plus the raw config-file dict (for grids).
    """
    raw: dict = {}
    if args.config:
        raw = _load_config_file(args.config)
    base = dict(raw)
    base.pop("grid", None)
    if args.arch is not None:
        base["arch"] = args.arch
    cfg = train_config_from_dict(base) if base else TrainConfig()

    overrides = {}
    for key in ("epochs", "lr", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "batch_size", None) is not None:
        overrides["batch_size"] = args.batch_size
    if getattr(args, "scale", None) is not None:
        overrides["label_scale"] = args.scale
    if getattr(args, "frozen", None):
        overrides["frozen"] = True
    for key in ("patch", "blocks", "heads", "latent"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "resolution", None) is not None:
        h, w = _parse_resolution(args.resolution)
        overrides["image_h"] = h
        overrides["image_w"] = w
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if getattr(args, "weights", None) is not None:
        from dataclasses import replace

        cfg = replace(cfg, weights_file=args.weights)
    return cfg, raw


def _emit(obj: dict, out_dir, filename: str) -> None:
    if out_dir is None:
        json.dump(obj, sys.stdout, sort_keys=True, indent=2)
        sys.stdout.write("\n")
    else:
        reporting.save_json(obj, Path(out_dir) / filename)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_frames=args.frames,
        resolution=_parse_resolution(args.resolution),
        name=args.name,
    )
    ds, poses = synth_scene(spec, args.seed)
    pair_spec = generate_pairs(ds, args.window)
    preds = synth_pair_predictions(ds, poses, pair_spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scene_dir(ds, out, poses=poses, pair_spec=pair_spec, pair_preds=preds)
    logger.info("wrote %d frames and %d pairs to %s", args.frames, len(pair_spec.pairs), out)
    return 0


def cmd_pairs(args) -> int:
    scene = _resolve_scene(args)
    ds = load_scene(scene)
    pair_spec = generate_pairs(ds, args.window)
    lines = "\n".join(f"{r} {s}" for r, s in pair_spec.pairs) + "\n"
    if args.out is None:
        sys.stdout.write(lines)
    else:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "pairs.txt").write_text(lines)
    return 0


def cmd_align(args) -> int:
    scene = _resolve_scene(args)
    preds = load_pair_predictions(scene)
    pair_spec = load_pair_list(scene)
    if pair_spec is not None:
        listed = set(pair_spec.pairs)
        preds = [p for p in preds if (p.ref_id, p.src_id) in listed]
    world, residuals = global_align(preds, args.origin)

    report = {
        "format_version": 1,
        "origin": args.origin,
        "frames": [
            {
                "frame_id": fid,
                "scale": transform.scale,
                "rotation": transform.rotation.tolist(),
                "translation": transform.translation.tolist(),
            }
            for fid, (transform, _) in sorted(world.items())
        ],
        "residuals": residuals,
        "max_rmse": max((r["rmse"] for r in residuals), default=0.0),
    }
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for fid, (_, pm) in sorted(world.items()):
            save_pointmap(pm, fid, out / f"frame-{fid:06d}.pts")
        reporting.write_residual_csv(residuals, out / "residuals.csv")
        reporting.plot_residuals(residuals, out / "residuals.png")
    _emit(report, args.out, "alignment_report.json")
    return 0


def cmd_train(args) -> int:
    cfg, _ = _train_config_from_args(args)
    cfg = cfg.resolved()
    scene = _resolve_scene(args)
    ds = load_scene(scene, target_resolution=(cfg.model.image_h, cfg.model.image_w))
    split_spec = split(ds, args.heldout_fraction, cfg.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.bin"
    model, train_report = train(ds, split_spec, cfg, checkpoint_path=ckpt_path)
    eval_report = evaluate(model, ds, split_spec.heldout_ids)

    report = train_report_dict(train_report, eval_report, checkpoint_name=ckpt_path.name)
    report["split"] = {"train_ids": split_spec.train_ids, "heldout_ids": split_spec.heldout_ids}
    reporting.save_json(report, out / "report.json")
    reporting.write_loss_csv(train_report.losses, out / "loss_curve.csv")
    reporting.plot_loss_curve(train_report.losses, out / "loss_curve.png",
                              title=f"{cfg.arch} on {ds.name}")
    logger.info(
        "final train loss %.6g, held-out mean Euclidean error %.6g",
        train_report.losses[-1], eval_report.mean_euclid,
    )
    return 0


def cmd_eval(args) -> int:
    scene = _resolve_scene(args)
    model = load_checkpoint(args.checkpoint)
    ds = load_scene(scene, target_resolution=(model.config.image_h, model.config.image_w))
    if args.heldout_fraction is not None:
        if args.seed is None:
            raise ConfigError("--heldout-fraction needs --seed to reproduce the split")
        ids = split(ds, args.heldout_fraction, args.seed).heldout_ids
    else:
        ids = ds.labeled_ids()
    eval_report = evaluate(model, ds, ids)
    report = {
        "format_version": 1,
        "checkpoint": str(args.checkpoint),
        "frames": ids,
        "eval": {
            "mse": eval_report.mse,
            "mean_euclid": eval_report.mean_euclid,
            "per_frame": eval_report.per_frame,
        },
    }
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        reporting.write_eval_csv(eval_report.per_frame, out / "eval_frames.csv")
        reporting.plot_eval(eval_report.per_frame, out / "eval_frames.png")
    _emit(report, args.out, "eval.json")
    return 0


def cmd_ablate(args) -> int:
    cfg, raw = _train_config_from_args(args)
    grid = raw.get("grid")
    if not grid:
        raise ConfigError("ablate needs a config file with a non-empty 'grid' object")
    cfg = cfg.resolved()
    scene = _resolve_scene(args)
    ds = load_scene(scene, target_resolution=(cfg.model.image_h, cfg.model.image_w))
    split_spec = split(ds, args.heldout_fraction, cfg.seed)

    result = ablate(ds, split_spec, cfg, grid, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reporting.save_json(result, out / "ablation.json")
    reporting.write_ablation_csv(result["cells"], out / "ablation.csv")
    reporting.plot_ablation(result["cells"], out / "ablation.png", best_cell=result["best_cell"])
    logger.info("best cell: %s", result["best_cell"])
    return 0


def cmd_export_ply(args) -> int:
    scene = _resolve_scene(args)
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
        ds = load_scene(scene, target_resolution=(model.config.image_h, model.config.image_w))
        frame = ds.frames[args.frame]
        x = Tensor(frame.image.transpose(2, 0, 1)[None].copy())
        pred = model.forward(x, training=False)
        points = pred.data[0].transpose(1, 2, 0).astype(np.float64) / model.output_scale
        pm = PointMap(points=points, valid=np.ones(points.shape[:2], dtype=bool))
    else:
        ds = load_scene(scene)
        frame = ds.frames[args.frame]
        if frame.label is None:
            raise ConfigError(f"frame {args.frame} has no label pointmap; pass --checkpoint")
        pm = frame.label
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = export_ply(pm, frame.image, out)
    print(f"wrote {count} vertices to {out}", file=sys.stderr)
    return 0


def cmd_info(args) -> int:
    header = read_header(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    info = {
        "architecture": header["architecture"],
        "config": header["config"],
        "param_count": param_count(model),
        "header_param_count": checkpoint_param_count(args.checkpoint),
        "tensors": len(header["tensors"]),
        "size_bytes": Path(args.checkpoint).stat().st_size,
    }
    json.dump(info, sys.stdout, sort_keys=True, indent=2)
    sys.stdout.write("\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_scene_args(sub) -> None:
    sub.add_argument("scene", nargs="?", default=None, help="scene directory")
    sub.add_argument("--scene", dest="scene_flag", default=None, help="scene directory")


def _add_train_flags(sub) -> None:
    sub.add_argument("--config", default=None, help="JSON config file (flags override it)")
    sub.add_argument("--arch", choices=["vanilla-cnn", "backbone-head", "vit"], default=None)
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--lr", type=float, default=None)
    sub.add_argument("--batch-size", type=int, default=None)
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--scale", type=float, default=None, help="label scale factor")
    sub.add_argument("--frozen", action="store_true", default=None,
                     help="freeze the backbone (backbone-head only)")
    sub.add_argument("--patch", type=int, default=None, help="ViT patch size")
    sub.add_argument("--blocks", type=int, default=None, help="ViT encoder/decoder block count")
    sub.add_argument("--heads", type=int, default=None, help="ViT attention heads")
    sub.add_argument("--latent", type=int, default=None, help="ViT latent dimension")
    sub.add_argument("--resolution", default=None, help="training resolution, e.g. 64x64")
    sub.add_argument("--weights", default=None, help="backbone weight checkpoint to load")
    sub.add_argument("--heldout-fraction", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenedistill",
        description="Distill scene-specific pointmap regressors from teacher pointmaps.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log details to stderr")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="render a synthetic scene with exact labels")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", default="64x64")
    p.add_argument("--window", type=int, default=2, help="pairing window for teacher pairs")
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("pairs", help="write the sliding-window pair list")
    _add_scene_args(p)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pairs)

    p = subs.add_parser("align", help="fuse pairwise teacher maps into world pointmaps")
    _add_scene_args(p)
    p.add_argument("--origin", type=int, default=0, help="frame fixing the world coordinates")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_align)

    p = subs.add_parser("train", help="train a student model on a labeled scene")
    _add_scene_args(p)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a labeled scene")
    _add_scene_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--heldout-fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("ablate", help="run a hyperparameter grid")
    _add_scene_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("export-ply", help="export a pointmap or prediction as ASCII PLY")
    _add_scene_args(p)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="export the model's prediction instead")
    p.set_defaults(func=cmd_export_ply)

    p = subs.add_parser("info", help="inspect a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except SceneDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
