"""Scene ingestion, pair generation, splits, and synthetic ground truth.

A scene directory holds sequential RGB frames plus optional per-frame
pointmap labels (world coordinates, produced by the alignment step from
teacher output). The synthetic generator renders an axis-aligned textured
room through a pinhole camera and knows the exact 3D point behind every
pixel, standing in for teacher inference in tests.

Directory layout::

    scene/
      meta.json                        {scene, native_resolution, label_scale}
      images/frame-%06d.color.png      8-bit RGB
      labels/frame-%06d.pts            world pointmaps (optional)
      pairs.txt                        lines "ref_id src_id" (optional)
      pairs/pair-%06d-%06d.{ref,src}.pts   pairwise camera-frame teacher maps
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .alignment import PairPrediction, PointMap, Sim3Transform, apply_sim3, load_pointmap, save_pointmap
from .errors import ConfigError, GenerationError, LoadError

META_FORMAT_VERSION = 1

_FRAME_RE = re.compile(r"frame-(\d{6})\.color\.png$")
_PAIR_RE = re.compile(r"pair-(\d{6})-(\d{6})\.ref\.pts$")


@dataclass
class Frame:
    frame_id: int
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: Optional[PointMap] = None


@dataclass
class SceneDataset:
    name: str
    frames: list[Frame]
    resolution: tuple[int, int]  # (h, w)
    label_scale: float = 1.0

    def labeled_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames if f.label is not None]

    def frame(self, frame_id: int) -> Frame:
        return self.frames[frame_id]


@dataclass
class PairSpec:
    pairs: list[tuple[int, int]]  # ordered (ref_id, src_id)


@dataclass
class SplitSpec:
    train_ids: list[int]
    heldout_ids: list[int]
    seed: int


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum((np.floor((np.arange(n_out) + 0.5) * n_in / n_out)).astype(int), n_in - 1)


def _resize_pointmap_nearest(pm: PointMap, out_h: int, out_w: int) -> PointMap:
    """Nearest-neighbor resize; never interpolates across depth edges."""
    if (pm.height, pm.width) == (out_h, out_w):
        return PointMap(points=pm.points.copy(), valid=pm.valid.copy())
    yi = _nearest_indices(pm.height, out_h)
    xi = _nearest_indices(pm.width, out_w)
    return PointMap(points=pm.points[yi][:, xi], valid=pm.valid[yi][:, xi])


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_scene(scene_dir, target_resolution: Optional[tuple[int, int]] = None) -> SceneDataset:
    """Load a scene directory; images in [0, 1], labels when present.

    Images are bilinearly resized to ``target_resolution``; label pointmaps
    use nearest-neighbor. Loading at native resolution leaves label values
    bitwise unchanged.
    """
    root = Path(scene_dir)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise LoadError(f"scene {root} has no images/ directory")

    entries = []
    for path in sorted(images_dir.iterdir()):
        m = _FRAME_RE.search(path.name)
        if m:
            entries.append((int(m.group(1)), path))
    if not entries:
        raise LoadError(f"scene {root} contains no frame-*.color.png images")
    entries.sort()

    name = root.name
    label_scale = 1.0
    meta_path = root / "meta.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"scene {root}: bad meta.json: {exc}") from exc
        name = meta.get("scene", name)
        label_scale = float(meta.get("label_scale", 1.0))

    frames: list[Frame] = []
    resolution = target_resolution
    for dense_id, (file_idx, path) in enumerate(entries):
        try:
            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise LoadError(f"frame {file_idx} ({path.name}): cannot decode image: {exc}") from exc
        if resolution is None:
            resolution = (img.shape[0], img.shape[1])
        if target_resolution is None and (img.shape[0], img.shape[1]) != resolution:
            raise LoadError(
                f"frame {file_idx}: resolution {img.shape[:2]} differs from first frame {resolution}"
            )
        img = _resize_bilinear(img, resolution[0], resolution[1])

        label = None
        label_path = root / "labels" / f"frame-{file_idx:06d}.pts"
        if label_path.exists():
            try:
                label, _ = load_pointmap(label_path)
            except LoadError as exc:
                raise LoadError(f"frame {file_idx}: {exc}") from exc
            label = _resize_pointmap_nearest(label, resolution[0], resolution[1])
        frames.append(Frame(frame_id=dense_id, image=img, label=label))

    return SceneDataset(name=name, frames=frames, resolution=resolution, label_scale=label_scale)


def load_pair_list(scene_dir) -> Optional[PairSpec]:
    """Read pairs.txt if present (lines of ``ref_id src_id``)."""
    path = Path(scene_dir) / "pairs.txt"
    if not path.exists():
        return None
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise LoadError(f"pairs.txt line {lineno}: expected 'ref_id src_id', got {line!r}")
        pairs.append((int(parts[0]), int(parts[1])))
    return PairSpec(pairs=pairs)


def load_pair_predictions(scene_dir) -> list[PairPrediction]:
    """Load pairwise camera-frame teacher maps from ``scene/pairs/``."""
    pair_dir = Path(scene_dir) / "pairs"
    if not pair_dir.is_dir():
        raise LoadError(f"scene {scene_dir} has no pairs/ directory with teacher pairs")
    preds = []
    for path in sorted(pair_dir.iterdir()):
        m = _PAIR_RE.search(path.name)
        if not m:
            continue
        ref_id, src_id = int(m.group(1)), int(m.group(2))
        src_path = pair_dir / f"pair-{ref_id:06d}-{src_id:06d}.src.pts"
        if not src_path.exists():
            raise LoadError(f"pair ({ref_id}, {src_id}): missing {src_path.name}")
        map_ref, _ = load_pointmap(path)
        map_src, _ = load_pointmap(src_path)
        preds.append(PairPrediction(ref_id=ref_id, src_id=src_id, map_ref=map_ref, map_src=map_src))
    if not preds:
        raise LoadError(f"scene {scene_dir}: pairs/ contains no pair-*.{{ref,src}}.pts files")
    return preds


# ---------------------------------------------------------------------------
# pairing, scaling, splitting
# ---------------------------------------------------------------------------

def generate_pairs(ds: SceneDataset, window: int) -> PairSpec:
    """Sliding-window ordered pairs: (i, i+k) and (i+k, i) for 1 <= k <= window."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    n = len(ds.frames)
    pairs: list[tuple[int, int]] = []
    for i in range(n):
        for k in range(1, window + 1):
            j = i + k
            if j >= n:
                break
            pairs.append((i, j))
            pairs.append((j, i))
    return PairSpec(pairs=pairs)


def scale_labels(ds: SceneDataset, factor: float) -> SceneDataset:
    """Multiply all label points by ``factor``; the applied scale is recorded."""
    if factor <= 0:
        raise ConfigError(f"label scale factor must be positive, got {factor}")
    frames = []
    for f in ds.frames:
        label = f.label
        if label is not None and factor != 1.0:
            pts = label.points.copy()
            pts[label.valid] *= factor
            label = PointMap(points=pts, valid=label.valid.copy())
        frames.append(Frame(frame_id=f.frame_id, image=f.image, label=label))
    return SceneDataset(
        name=ds.name,
        frames=frames,
        resolution=ds.resolution,
        label_scale=ds.label_scale * factor,
    )


def split(ds: SceneDataset, heldout_fraction: float, seed: int) -> SplitSpec:
    """Seeded uniform held-out sample over the labeled frames."""
    if not 0.0 < heldout_fraction < 1.0:
        raise ConfigError(f"held-out fraction must be in (0, 1), got {heldout_fraction}")
    labeled = ds.labeled_ids()
    n = len(labeled)
    if n < 2:
        raise ConfigError(f"need at least 2 labeled frames to split, got {n}")
    n_held = max(1, int(round(heldout_fraction * n)))
    if n_held >= n:
        raise ConfigError(
            f"held-out fraction {heldout_fraction} leaves no training frames for {n} labeled"
        )
    rng = np.random.default_rng(seed)
    held = sorted(int(i) for i in rng.choice(labeled, size=n_held, replace=False))
    train = sorted(set(labeled) - set(held))
    return SplitSpec(train_ids=train, heldout_ids=held, seed=seed)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Axis-aligned textured room observed by a panning pinhole camera."""

    n_frames: int
    resolution: tuple[int, int] = (64, 64)
    room_size: tuple[float, float, float] = (4.0, 4.0, 3.0)  # full extents x, y, z
    camera_radius: float = 0.6
    arc_degrees: float = 60.0
    fov_degrees: float = 60.0
    checker_size: float = 0.5
    name: str = "synthetic"


_WALL_COLORS = np.array(
    [
        [0.85, 0.35, 0.30],  # -x
        [0.30, 0.75, 0.40],  # +x
        [0.30, 0.45, 0.85],  # -y
        [0.85, 0.75, 0.25],  # +y
        [0.55, 0.35, 0.75],  # -z (floor)
        [0.80, 0.80, 0.80],  # +z (ceiling)
    ]
)


def camera_pose(position: np.ndarray, yaw: float) -> Sim3Transform:
    """Camera-to-world pose for a camera at ``position`` facing ``yaw``.

    Camera convention: +z forward, +x right, +y down; world up is +z.
    """
    forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.column_stack([right, down, forward])
    return Sim3Transform(rotation, np.asarray(position, dtype=np.float64), 1.0)


def render_frame(
    pose: Sim3Transform,
    resolution: tuple[int, int],
    fov_degrees: float,
    box_min: np.ndarray,
    box_max: np.ndarray,
    checker_size: float = 0.5,
) -> tuple[np.ndarray, PointMap]:
    """Ray-cast the inside of a box; returns (RGB image, world pointmap)."""
    h, w = resolution
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    pos = pose.translation
    margin = 1e-3
    if not np.all((pos > box_min + margin) & (pos < box_max - margin)):
        raise GenerationError(f"camera at {pos.tolist()} is outside (or on) the room geometry")

    fx = (w / 2.0) / math.tan(math.radians(fov_degrees) / 2.0)
    fy = fx
    us = (np.arange(w) + 0.5 - w / 2.0) / fx
    vs = (np.arange(h) + 0.5 - h / 2.0) / fy
    dirs_cam = np.stack(
        [np.broadcast_to(us, (h, w)), np.broadcast_to(vs[:, None], (h, w)), np.ones((h, w))],
        axis=-1,
    )
    dirs = dirs_cam @ pose.rotation.T  # rows are world-space ray directions

    t_best = np.full((h, w), np.inf)
    wall_best = np.zeros((h, w), dtype=int)
    for axis in range(3):
        for side, bound in enumerate((box_min[axis], box_max[axis])):
            d = dirs[..., axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (bound - pos[axis]) / d
                t = np.where(np.abs(d) > 1e-12, t, np.inf)
                # rays parallel to this wall yield inf*0 = nan hits; the
                # bounds checks below reject those pixels for this wall
                hit = pos + t[..., None] * dirs
            inside = np.isfinite(t) & (t > 1e-9)
            for other in range(3):
                if other == axis:
                    continue
                inside &= (hit[..., other] >= box_min[other] - 1e-9) & (
                    hit[..., other] <= box_max[other] + 1e-9
                )
            closer = inside & (t < t_best)
            t_best = np.where(closer, t, t_best)
            wall_best = np.where(closer, axis * 2 + side, wall_best)

    if not np.isfinite(t_best).all():
        raise GenerationError("some rays escaped the room; geometry is not closed")
    points = pos + t_best[..., None] * dirs

    image = np.zeros((h, w, 3))
    for wall in range(6):
        mask = wall_best == wall
        if not mask.any():
            continue
        axis = wall // 2
        a1, a2 = [a for a in range(3) if a != axis]
        p = points[..., a1][mask]
        q = points[..., a2][mask]
        checker = (np.floor(p / checker_size) + np.floor(q / checker_size)) % 2
        gu = (p - box_min[a1]) / (box_max[a1] - box_min[a1])
        gv = (q - box_min[a2]) / (box_max[a2] - box_min[a2])
        base = _WALL_COLORS[wall]
        shade = base[None, :] * (0.45 + 0.35 * checker)[:, None]
        shade = shade + 0.2 * np.stack([gu, gv, 1.0 - gu], axis=-1)
        image[mask] = shade
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    pm = PointMap(points=points, valid=np.ones((h, w), dtype=bool))
    return image, pm


def synth_scene(spec: SynthSpec, seed: int) -> tuple[SceneDataset, list[Sim3Transform]]:
    """Render a synthetic scene with exact world labels and known poses."""
    if spec.n_frames < 1:
        raise ConfigError(f"n_frames must be >= 1, got {spec.n_frames}")
    ex, ey, ez = (s / 2.0 for s in spec.room_size)
    box_min = np.array([-ex, -ey, -ez])
    box_max = np.array([ex, ey, ez])
    if spec.camera_radius >= min(ex, ey) - 0.05:
        raise GenerationError(
            f"camera radius {spec.camera_radius} does not fit inside room {spec.room_size}"
        )

    rng = np.random.default_rng(seed)
    height_jitter = rng.uniform(-0.05, 0.05, size=spec.n_frames) * ez

    arc = math.radians(spec.arc_degrees)
    poses: list[Sim3Transform] = []
    frames: list[Frame] = []
    for k in range(spec.n_frames):
        yaw = -arc / 2.0 + (arc * k / max(spec.n_frames - 1, 1))
        position = np.array(
            [
                spec.camera_radius * math.cos(yaw),
                spec.camera_radius * math.sin(yaw),
                float(height_jitter[k]),
            ]
        )
        pose = camera_pose(position, yaw)
        image, pm = render_frame(
            pose, spec.resolution, spec.fov_degrees, box_min, box_max, spec.checker_size
        )
        poses.append(pose)
        frames.append(Frame(frame_id=k, image=image, label=pm))

    ds = SceneDataset(name=spec.name, frames=frames, resolution=spec.resolution, label_scale=1.0)
    return ds, poses


def synth_pair_predictions(
    ds: SceneDataset, poses: Sequence[Sim3Transform], pair_spec: PairSpec
) -> list[PairPrediction]:
    """Exact camera-frame pairwise maps derived from world labels and poses."""
    preds = []
    for ref_id, src_id in pair_spec.pairs:
        to_ref = poses[ref_id].inverse()
        map_ref = apply_sim3(to_ref, ds.frames[ref_id].label)
        map_src = apply_sim3(to_ref, ds.frames[src_id].label)
        preds.append(PairPrediction(ref_id=ref_id, src_id=src_id, map_ref=map_ref, map_src=map_src))
    return preds


# ---------------------------------------------------------------------------
# scene directory output
# ---------------------------------------------------------------------------

def write_scene_dir(
    ds: SceneDataset,
    out_dir,
    poses: Optional[Sequence[Sim3Transform]] = None,
    pair_spec: Optional[PairSpec] = None,
    pair_preds: Optional[Sequence[PairPrediction]] = None,
) -> None:
    """Write a dataset (and optional pairing artifacts) as a scene directory."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    has_labels = any(f.label is not None for f in ds.frames)
    if has_labels:
        (root / "labels").mkdir(exist_ok=True)

    for f in ds.frames:
        img8 = np.clip(np.rint(f.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(root / "images" / f"frame-{f.frame_id:06d}.color.png")
        if f.label is not None:
            save_pointmap(f.label, f.frame_id, root / "labels" / f"frame-{f.frame_id:06d}.pts")

    meta = {
        "format_version": META_FORMAT_VERSION,
        "scene": ds.name,
        "native_resolution": list(ds.resolution),
        "label_scale": ds.label_scale,
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    if pair_spec is not None:
        lines = [f"{r} {s}" for r, s in pair_spec.pairs]
        (root / "pairs.txt").write_text("\n".join(lines) + "\n")

    if pair_preds:
        pair_dir = root / "pairs"
        pair_dir.mkdir(exist_ok=True)
        for pred in pair_preds:
            stem = f"pair-{pred.ref_id:06d}-{pred.src_id:06d}"
            save_pointmap(pred.map_ref, pred.ref_id, pair_dir / f"{stem}.ref.pts")
            save_pointmap(pred.map_src, pred.src_id, pair_dir / f"{stem}.src.pts")

    if poses is not None:
        records = [
            {
                "frame_id": i,
                "rotation": p.rotation.tolist(),
                "translation": p.translation.tolist(),
                "scale": p.scale,
            }
            for i, p in enumerate(poses)
        ]
        (root / "poses.json").write_text(json.dumps(records, sort_keys=True, indent=2) + "\n")
