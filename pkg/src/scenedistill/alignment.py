"""Fusing pairwise camera-frame pointmaps into one world frame.

Each stereo pair provides two pointmaps expressed in the first (reference)
image's camera frame. A closed-form similarity fit per ordered pair gives a
relative Sim(3), and composing those along a BFS spanning tree anchored at a
chosen origin frame places every frame's own pointmap in a single fixed
world coordinate system (the origin's camera frame).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import AlignmentError, DegenerateInputError, DimensionError, LoadError

logger = logging.getLogger(__name__)

POINTMAP_FORMAT_VERSION = 1
_ORTHO_TOL = 1e-9


@dataclass
class PointMap:
    """H x W grid of 3D points plus a per-pixel validity mask."""

    points: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise DimensionError(f"points must be (H, W, 3), got {self.points.shape}")
        if self.valid.shape != self.points.shape[:2]:
            raise DimensionError(
                f"mask shape {self.valid.shape} does not match points {self.points.shape[:2]}"
            )
        if self.valid.any() and not np.isfinite(self.points[self.valid]).all():
            raise DegenerateInputError("pointmap has non-finite values at valid pixels")

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]


@dataclass
class PairPrediction:
    """Teacher output for one ordered image pair.

    ``map_ref`` holds image ``ref_id``'s points in frame ``ref_id``;
    ``map_src`` holds image ``src_id``'s points, also in frame ``ref_id``.
    """

    ref_id: int
    src_id: int
    map_ref: PointMap
    map_src: PointMap

    def __post_init__(self):
        if self.ref_id == self.src_id:
            raise DimensionError(f"pair must relate two distinct frames, got {self.ref_id} twice")
        if (self.map_ref.height, self.map_ref.width) != (self.map_src.height, self.map_src.width):
            raise DimensionError("both maps of a pair must share resolution")


class Sim3Transform:
    """Similarity transform p -> scale * rotation @ p + translation."""

    __slots__ = ("rotation", "translation", "scale")

    def __init__(self, rotation: np.ndarray, translation: np.ndarray, scale: float):
        r = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise DimensionError(f"rotation must be 3x3, got {r.shape}")
        if scale <= 0:
            raise DegenerateInputError(f"scale must be positive, got {scale}")
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > _ORTHO_TOL or np.linalg.det(r) < 0:
            raise DegenerateInputError(
                f"rotation is not orthonormal with det +1 (drift {drift:.3e})"
            )
        self.rotation = r
        self.translation = t
        self.scale = float(scale)

    @staticmethod
    def identity() -> "Sim3Transform":
        return Sim3Transform(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.rotation.T) + self.translation

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """Transform equal to applying ``other`` first, then ``self``."""
        r = self.rotation @ other.rotation
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > _ORTHO_TOL:
            u, _, vt = np.linalg.svd(r)
            r = u @ vt
            if np.linalg.det(r) < 0:
                u[:, -1] = -u[:, -1]
                r = u @ vt
        t = self.scale * (self.rotation @ other.translation) + self.translation
        return Sim3Transform(r, t, self.scale * other.scale)

    def inverse(self) -> "Sim3Transform":
        r = self.rotation.T
        s = 1.0 / self.scale
        t = -s * (r @ self.translation)
        return Sim3Transform(r, t, s)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def __repr__(self) -> str:
        return f"Sim3Transform(scale={self.scale:.6g}, t={self.translation.round(6).tolist()})"


@dataclass
class Edge:
    """Relative Sim(3) estimated from one ordered pair, with its fit RMSE."""

    ref_id: int
    src_id: int
    transform: Sim3Transform  # maps frame src_id coords into frame ref_id
    rmse: float
    n_points: int


@dataclass
class SceneGraph:
    """Frames, usable relative-pose edges, and the chosen origin."""

    nodes: list[int]
    edges: list[Edge]
    origin: int
    dropped: list[tuple[int, int, str]] = field(default_factory=list)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Sim3Transform:
    """Least-squares similarity aligning ``src`` onto ``dst``.

    Minimizes sum ||dst_k - (s * R @ src_k + t)||^2 via SVD of the 3x3
    cross-covariance, with the determinant-sign correction that keeps
    det(R) = +1.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DimensionError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateInputError(f"umeyama needs >= 3 correspondences, got {n}")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    cov = dst_c.T @ src_c / n
    u, d, vt = np.linalg.svd(cov)
    if d[0] <= 0 or d[1] <= max(1e-12 * d[0], 1e-300):
        raise DegenerateInputError("cross-covariance is rank-deficient (collinear points?)")

    s_diag = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_diag[2] = -1.0
    rotation = u @ np.diag(s_diag) @ vt

    if with_scale:
        var_src = (src_c * src_c).sum() / n
        if var_src <= 0:
            raise DegenerateInputError("source points are all identical")
        scale = float((d * s_diag).sum() / var_src)
        if scale <= 0:
            raise DegenerateInputError(f"estimated scale {scale} is not positive")
    else:
        scale = 1.0
    translation = mu_dst - scale * rotation @ mu_src
    return Sim3Transform(rotation, translation, scale)


def apply_sim3(transform: Sim3Transform, pm: PointMap) -> PointMap:
    """Transform valid points; invalid entries and the mask are preserved."""
    points = pm.points.copy()
    points[pm.valid] = transform.apply(pm.points[pm.valid])
    return PointMap(points=points, valid=pm.valid.copy())


def estimate_edge(pair: PairPrediction, self_map_src: PointMap) -> Edge:
    """Fit the Sim(3) taking frame ``src_id`` coordinates into frame ``ref_id``.

    ``self_map_src`` is image ``src_id``'s pointmap in its own camera frame
    (the ``map_ref`` of the reversed ordered pair); correspondences are the
    jointly valid pixels against ``pair.map_src``.
    """
    if (self_map_src.height, self_map_src.width) != (pair.map_src.height, pair.map_src.width):
        raise DimensionError("self map resolution differs from the pair's maps")
    joint = self_map_src.valid & pair.map_src.valid
    count = int(joint.sum())
    if count < 3:
        raise DegenerateInputError(
            f"edge ({pair.ref_id}, {pair.src_id}) has only {count} joint-valid pixels"
        )
    src_pts = self_map_src.points[joint]
    dst_pts = pair.map_src.points[joint]
    transform = umeyama(src_pts, dst_pts, with_scale=True)
    residual = transform.apply(src_pts) - dst_pts
    rmse = float(np.sqrt((residual * residual).sum(axis=1).mean()))
    return Edge(ref_id=pair.ref_id, src_id=pair.src_id, transform=transform,
                rmse=rmse, n_points=count)


def _self_maps(
    pairs: Sequence[PairPrediction],
    extra: Optional[dict[int, PointMap]] = None,
) -> dict[int, PointMap]:
    """Each frame's own-frame pointmap, taken from the first pair it refs."""
    maps: dict[int, PointMap] = dict(extra) if extra else {}
    for pair in sorted(pairs, key=lambda p: (p.ref_id, p.src_id)):
        maps.setdefault(pair.ref_id, pair.map_ref)
    return maps


def build_scene_graph(
    pairs: Sequence[PairPrediction],
    origin: int,
    self_maps: Optional[dict[int, PointMap]] = None,
) -> SceneGraph:
    """Estimate all usable edges; degenerate edges are dropped with a warning."""
    if not pairs and not self_maps:
        raise AlignmentError("no pairs given")
    self_maps = _self_maps(pairs, self_maps)
    nodes = sorted(set(self_maps) | {p.src_id for p in pairs})
    if origin not in nodes:
        raise AlignmentError(f"origin frame {origin} does not appear in any pair")

    edges: list[Edge] = []
    dropped: list[tuple[int, int, str]] = []
    for pair in sorted(pairs, key=lambda p: (p.ref_id, p.src_id)):
        self_map = self_maps.get(pair.src_id)
        if self_map is None:
            dropped.append((pair.ref_id, pair.src_id, "source frame has no self map"))
            continue
        try:
            edges.append(estimate_edge(pair, self_map))
        except DegenerateInputError as exc:
            logger.warning("dropping edge (%d, %d): %s", pair.ref_id, pair.src_id, exc)
            dropped.append((pair.ref_id, pair.src_id, str(exc)))
    return SceneGraph(nodes=nodes, edges=edges, origin=origin, dropped=dropped)


def _spanning_transforms(graph: SceneGraph) -> dict[int, Sim3Transform]:
    """BFS from the origin; ties broken by ascending frame id."""
    by_pair: dict[tuple[int, int], Edge] = {(e.ref_id, e.src_id): e for e in graph.edges}
    neighbors: dict[int, set[int]] = {n: set() for n in graph.nodes}
    for e in graph.edges:
        neighbors[e.ref_id].add(e.src_id)
        neighbors[e.src_id].add(e.ref_id)

    transforms: dict[int, Sim3Transform] = {graph.origin: Sim3Transform.identity()}
    frontier = [graph.origin]
    while frontier:
        frontier.sort()
        next_frontier = []
        for u in frontier:
            for v in sorted(neighbors[u]):
                if v in transforms:
                    continue
                direct = by_pair.get((u, v))
                if direct is not None:
                    rel = direct.transform  # frame v -> frame u
                else:
                    rel = by_pair[(v, u)].transform.inverse()
                transforms[v] = transforms[u].compose(rel)
                next_frontier.append(v)
        frontier = next_frontier

    missing = sorted(set(graph.nodes) - set(transforms))
    if missing:
        reached = sorted(transforms)
        raise AlignmentError(
            f"scene graph is disconnected: component with origin {graph.origin} = {reached}, "
            f"unreachable frames = {missing}"
        )
    return transforms


def global_align(
    pairs: Sequence[PairPrediction],
    origin: int,
    self_maps: Optional[dict[int, PointMap]] = None,
) -> tuple[dict[int, tuple[Sim3Transform, PointMap]], list[dict]]:
    """Place every frame's own pointmap in the origin frame's coordinates.

    Returns a mapping ``frame id -> (world transform, world pointmap)`` plus
    the per-edge residual report (see :func:`alignment_residual`). A frame
    with no pairs (single-frame scene) can be supplied via ``self_maps``.
    """
    graph = build_scene_graph(pairs, origin, self_maps)
    transforms = _spanning_transforms(graph)
    self_maps = _self_maps(pairs, self_maps)

    result: dict[int, tuple[Sim3Transform, PointMap]] = {}
    for frame in graph.nodes:
        self_map = self_maps.get(frame)
        if self_map is None:
            raise AlignmentError(
                f"frame {frame} never appears as a pair reference, so it has no own pointmap; "
                "provide both orders of every pair"
            )
        result[frame] = (transforms[frame], apply_sim3(transforms[frame], self_map))

    report = alignment_residual(pairs, {f: t for f, (t, _) in result.items()},
                                usable={(e.ref_id, e.src_id) for e in graph.edges})
    return result, report


def alignment_residual(
    pairs: Sequence[PairPrediction],
    world_transforms: dict[int, Sim3Transform],
    usable: Optional[set[tuple[int, int]]] = None,
) -> list[dict]:
    """Per-edge RMSE between both frames' world-transformed shared points.

    For edge (ref, src): image src's own points mapped through the src world
    transform are compared against the pair's prediction of those points
    mapped through the ref world transform. Dropped edges are omitted.
    """
    self_maps = _self_maps(pairs)
    report = []
    for pair in sorted(pairs, key=lambda p: (p.ref_id, p.src_id)):
        key = (pair.ref_id, pair.src_id)
        if usable is not None and key not in usable:
            continue
        if pair.ref_id not in world_transforms or pair.src_id not in world_transforms:
            continue
        self_map = self_maps.get(pair.src_id)
        if self_map is None:
            continue
        joint = self_map.valid & pair.map_src.valid
        if int(joint.sum()) < 3:
            continue
        world_a = world_transforms[pair.src_id].apply(self_map.points[joint])
        world_b = world_transforms[pair.ref_id].apply(pair.map_src.points[joint])
        diff = world_a - world_b
        rmse = float(np.sqrt((diff * diff).sum(axis=1).mean()))
        report.append(
            {"ref_id": pair.ref_id, "src_id": pair.src_id,
             "rmse": rmse, "n_points": int(joint.sum())}
        )
    return report


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_pointmap(pm: PointMap, frame_id: int, path) -> None:
    """JSON header + newline + float32 points (H*W*3) + mask bytes (H*W)."""
    header = {
        "format_version": POINTMAP_FORMAT_VERSION,
        "frame_id": int(frame_id),
        "height": pm.height,
        "width": pm.width,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(pm.points, dtype="<f4").tobytes())
        f.write(pm.valid.astype(np.uint8).tobytes())


def load_pointmap(path) -> tuple[PointMap, int]:
    """Inverse of :func:`save_pointmap`; returns (pointmap, frame_id)."""
    try:
        with open(path, "rb") as f:
            line = f.readline()
            blob = f.read()
    except OSError as exc:
        raise LoadError(f"cannot read pointmap {path}: {exc}") from exc
    if not line.endswith(b"\n"):
        raise LoadError(f"pointmap {path} is truncated (no header line)")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"pointmap {path} has a malformed header: {exc}") from exc
    if header.get("format_version") != POINTMAP_FORMAT_VERSION:
        raise LoadError(f"pointmap {path}: unsupported format version")
    h, w = int(header["height"]), int(header["width"])
    expected = h * w * 3 * 4 + h * w
    if len(blob) != expected:
        raise LoadError(f"pointmap {path}: payload has {len(blob)} bytes, expected {expected}")
    points = np.frombuffer(blob, dtype="<f4", count=h * w * 3).reshape(h, w, 3)
    mask = np.frombuffer(blob, dtype=np.uint8, offset=h * w * 3 * 4, count=h * w)
    valid = mask.reshape(h, w).astype(bool)
    pts = points.astype(np.float64)
    # Any stored non-finite value invalidates its pixel rather than erroring.
    finite = np.isfinite(pts).all(axis=2)
    valid = valid & finite
    pts[~finite] = 0.0
    return PointMap(points=pts, valid=valid), int(header["frame_id"])


def export_ply(pm: PointMap, image: Optional[np.ndarray], path) -> int:
    """Write valid points as ASCII PLY with per-vertex RGB; returns the count.

    ``image`` is an (H, W, 3) array in [0, 1] supplying colors; pass None
    for uniform gray.
    """
    mask = pm.valid
    pts = pm.points[mask]
    if image is not None:
        img = np.asarray(image)
        if img.shape[:2] != (pm.height, pm.width) or img.shape[2] != 3:
            raise DimensionError(
                f"color image shape {img.shape} does not match pointmap "
                f"{pm.height}x{pm.width}"
            )
        colors = np.clip(np.rint(img[mask] * 255.0), 0, 255).astype(np.uint8)
    else:
        colors = np.full((pts.shape[0], 3), 200, dtype=np.uint8)

    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines))
        f.write("\n")
        for (x, y, z), (r, g, b) in zip(pts, colors):
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
    return int(pts.shape[0])
