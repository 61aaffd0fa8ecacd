"""Distillation training loop, held-out evaluation, and ablation grids.

Training minimizes the masked MSE between student predictions and scaled
teacher labels with mini-batch Adam over shuffled frames. Evaluation
reports both the masked MSE and the mean per-pixel Euclidean error,
converted back to original teacher units regardless of the label scale the
model was trained with.
"""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint  # re-exported API
from .dataset import SceneDataset, SplitSpec, scale_labels
from .errors import ConfigError, ContractError, NumericsError, SceneDistillError
from .models import (
    ARCH_BACKBONE_HEAD,
    ARCH_VANILLA_CNN,
    ARCH_VIT,
    BackboneHeadConfig,
    ModelConfig,
    StudentModel,
    VanillaCNNConfig,
    ViTConfig,
    build_model,
    config_from_dict,
    param_count,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward, mse_loss_masked

REPORT_FORMAT_VERSION = 1

_DEFAULT_LR = {ARCH_VIT: 1e-4, ARCH_VANILLA_CNN: 1e-3, ARCH_BACKBONE_HEAD: 1e-3}
_DEFAULT_LABEL_SCALE = {ARCH_VIT: 100.0, ARCH_VANILLA_CNN: 1.0, ARCH_BACKBONE_HEAD: 1.0}

# Short ablation keys accepted in grid specs, mapped onto model config fields.
_MODEL_FIELD_ALIASES = {
    "patch": "patch_size",
    "blocks": "num_blocks",
    "heads": "num_heads",
    "latent": "latent_dim",
}


@dataclass
class TrainConfig:
    arch: str = ARCH_VIT
    model: ModelConfig = field(default_factory=ViTConfig)
    epochs: int = 200
    lr: Optional[float] = None  # default depends on arch
    batch_size: int = 2
    label_scale: Optional[float] = None  # default depends on arch
    seed: int = 0
    frozen: bool = False  # backbone-head only
    dropout: bool = True
    weights_file: Optional[str] = None

    def resolved(self) -> "TrainConfig":
        """Copy with arch-dependent defaults filled in and flags propagated."""
        lr = self.lr if self.lr is not None else _DEFAULT_LR[self.arch]
        scale = self.label_scale if self.label_scale is not None else _DEFAULT_LABEL_SCALE[self.arch]
        model = self.model
        if isinstance(model, BackboneHeadConfig) and model.frozen != self.frozen:
            model = replace(model, frozen=self.frozen)
        if isinstance(model, ViTConfig) and not self.dropout and model.dropout_p != 0.0:
            model = replace(model, dropout_p=0.0)
        return replace(self, lr=lr, label_scale=scale, model=model)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.label_scale is not None and self.label_scale <= 0:
            raise ConfigError(f"label scale must be positive, got {self.label_scale}")
        self.model.validate()


@dataclass
class TrainReport:
    losses: list[float]  # per-epoch mean training loss, in scaled units
    epoch_seconds: list[float]
    checkpoint_path: Optional[str]
    config: TrainConfig


@dataclass
class EvalReport:
    mse: float  # masked MSE in original teacher units
    mean_euclid: float  # mean per-pixel Euclidean error, original units
    per_frame: list[dict]


def train_config_to_dict(cfg: TrainConfig) -> dict:
    cfg = cfg.resolved()
    d = {
        "arch": cfg.arch,
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "label_scale": cfg.label_scale,
        "seed": cfg.seed,
        "frozen": cfg.frozen,
        "dropout": cfg.dropout,
        "weights_file": cfg.weights_file,
        "model": dict(asdict(cfg.model)),
    }
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    arch = d.get("arch", ARCH_VIT)
    model_dict = d.pop("model", {})
    model = config_from_dict(arch, model_dict)
    known = {"arch", "epochs", "lr", "batch_size", "label_scale", "seed", "frozen",
             "dropout", "weights_file"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(model=model, **{k: v for k, v in d.items() if k != "arch"}, arch=arch)


def _frame_arrays(ds: SceneDataset, frame_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    frame = ds.frames[frame_id]
    if frame.label is None:
        raise ContractError(f"frame {frame_id} has no label")
    img = np.ascontiguousarray(frame.image.transpose(2, 0, 1), dtype=np.float32)
    pts = np.ascontiguousarray(frame.label.points.transpose(2, 0, 1), dtype=np.float32)
    mask = frame.label.valid[None].astype(np.float32)
    return img, pts, mask


def train(
    ds: SceneDataset,
    split_spec: SplitSpec,
    cfg: TrainConfig,
    checkpoint_path=None,
) -> tuple[StudentModel, TrainReport]:
    """Train a student on the split's training frames; deterministic per seed."""
    cfg = cfg.resolved()
    cfg.validate()
    if not split_spec.train_ids:
        raise ContractError("split has no training frames")

    factor = cfg.label_scale / ds.label_scale
    scaled = scale_labels(ds, factor) if factor != 1.0 else ds

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    model = build_model(cfg.arch, cfg.model, init_rng, weights_file=cfg.weights_file)
    model.output_scale = cfg.label_scale
    params = list(model.params.values())
    state = AdamState(params, lr=cfg.lr)

    cache = {fid: _frame_arrays(scaled, fid) for fid in split_spec.train_ids}

    losses: list[float] = []
    epoch_seconds: list[float] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = [split_spec.train_ids[i] for i in shuffle_rng.permutation(len(split_spec.train_ids))]
        loss_weighted = 0.0
        valid_total = 0.0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            imgs, pts, masks = zip(*(cache[fid] for fid in batch))
            x = Tensor(np.stack(imgs))
            y = Tensor(np.stack(pts))
            m = Tensor(np.stack(masks))
            try:
                with Tape() as tape:
                    pred = model.forward(x, training=True, rng=dropout_rng)
                    loss = mse_loss_masked(pred, y, m)
                backward(loss, tape)
                adam_step(params, state)
            except NumericsError as exc:
                raise NumericsError(
                    f"non-finite value at epoch {epoch}, batch starting frame {batch[0]}: {exc}"
                ) from exc
            batch_valid = float(m.data.sum())
            loss_weighted += loss.item() * batch_valid
            valid_total += batch_valid
        losses.append(loss_weighted / valid_total)
        epoch_seconds.append(time.perf_counter() - t0)

    path_str = None
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
        path_str = str(checkpoint_path)
    report = TrainReport(losses=losses, epoch_seconds=epoch_seconds,
                         checkpoint_path=path_str, config=cfg)
    return model, report


def evaluate(model: StudentModel, ds: SceneDataset, frame_ids: Sequence[int]) -> EvalReport:
    """Masked MSE and mean Euclidean error in original teacher units."""
    if not frame_ids:
        raise ContractError("evaluate needs at least one frame id")
    per_frame = []
    se_total = 0.0
    dist_total = 0.0
    valid_total = 0.0
    for fid in frame_ids:
        img, pts, mask = _frame_arrays(ds, fid)
        pred = model.forward(Tensor(img[None]), training=False)
        p = pred.data[0].astype(np.float64) / model.output_scale
        l = pts.astype(np.float64) / ds.label_scale
        m = mask[0].astype(np.float64)
        diff = (p - l) * m
        se = float((diff * diff).sum())
        dist = float((np.sqrt((diff * diff).sum(axis=0)) * m[0]).sum())
        v = float(m.sum())
        if v == 0:
            raise ContractError(f"frame {fid} has no valid labeled pixels")
        per_frame.append(
            {"frame_id": int(fid), "mse": se / (3.0 * v), "mean_euclid": dist / v,
             "valid_pixels": int(v)}
        )
        se_total += se
        dist_total += dist
        valid_total += v
    return EvalReport(
        mse=se_total / (3.0 * valid_total),
        mean_euclid=dist_total / valid_total,
        per_frame=per_frame,
    )


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply grid overrides; keys address TrainConfig or model config fields."""
    train_fields = {"epochs", "lr", "batch_size", "label_scale", "seed", "frozen", "dropout"}
    model_updates = {}
    train_updates = {}
    for key, value in overrides.items():
        if key in train_fields:
            train_updates[key] = value
            continue
        model_key = _MODEL_FIELD_ALIASES.get(key, key)
        if hasattr(cfg.model, model_key):
            model_updates[model_key] = value
        else:
            raise ConfigError(f"unknown ablation key {key!r} for arch {cfg.arch}")
    model = replace(cfg.model, **model_updates) if model_updates else cfg.model
    return replace(cfg, model=model, **train_updates)


def grid_cells(grid: dict[str, list]) -> list[dict]:
    """Cartesian product of the grid in key order; deterministic."""
    if not grid:
        raise ConfigError("ablation grid is empty")
    keys = list(grid.keys())
    for k in keys:
        if not isinstance(grid[k], (list, tuple)) or not grid[k]:
            raise ConfigError(f"grid entry {k!r} must be a non-empty list")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _run_cell(payload) -> dict:
    index, overrides, base_cfg, ds, split_spec = payload
    record = {"cell": index, "overrides": overrides}
    t0 = time.perf_counter()
    try:
        cfg = apply_overrides(base_cfg, overrides).resolved()
        model, train_report = train(ds, split_spec, cfg)
        eval_report = evaluate(model, ds, split_spec.heldout_ids)
        record.update(
            {
                "status": "ok",
                "config": train_config_to_dict(cfg),
                "final_train_loss": train_report.losses[-1],
                "eval": {"mse": eval_report.mse, "mean_euclid": eval_report.mean_euclid},
                "param_count": param_count(model),
            }
        )
    except SceneDistillError as exc:
        record.update({"status": "error", "error": str(exc)})
    record["seconds"] = time.perf_counter() - t0
    return record


def ablate(
    ds: SceneDataset,
    split_spec: SplitSpec,
    base_cfg: TrainConfig,
    grid: dict[str, list],
    jobs: int = 1,
) -> dict:
    """Run every grid cell with a shared seed and pick the best one.

    Best = lowest held-out mean Euclidean error; ties broken by fewer
    parameters, then by cell index. Failed cells are recorded and skipped.
    """
    cells = grid_cells(grid)
    payloads = [(i, overrides, base_cfg, ds, split_spec) for i, overrides in enumerate(cells)]
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_cell, payloads))
    else:
        records = [_run_cell(p) for p in payloads]
    records.sort(key=lambda r: r["cell"])

    best = None
    for r in records:
        if r["status"] != "ok":
            continue
        key = (r["eval"]["mean_euclid"], r["param_count"], r["cell"])
        if best is None or key < best[0]:
            best = (key, r["cell"])
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "grid": {k: list(v) for k, v in grid.items()},
        "cells": records,
        "best_cell": None if best is None else best[1],
    }


def train_report_dict(
    train_report: TrainReport,
    eval_report: Optional[EvalReport],
    checkpoint_name: Optional[str] = None,
) -> dict:
    """Stable JSON form of a completed run: config, losses, eval, timings."""
    out = {
        "format_version": REPORT_FORMAT_VERSION,
        "seed": train_report.config.seed,
        "config": train_config_to_dict(train_report.config),
        "loss_curve": [float(x) for x in train_report.losses],
        "eval": None,
        "timings": {
            "epoch_seconds": [float(t) for t in train_report.epoch_seconds],
            "total_seconds": float(sum(train_report.epoch_seconds)),
        },
        "checkpoint": checkpoint_name,
    }
    if eval_report is not None:
        out["eval"] = {
            "mse": eval_report.mse,
            "mean_euclid": eval_report.mean_euclid,
            "per_frame": eval_report.per_frame,
        }
    return out
