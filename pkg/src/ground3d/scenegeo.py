"""Scenes, axis-aligned boxes, proposal generation and box geometry."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
import zlib

import numpy as np

NUM_CLASSES = 18
K_PROPOSALS = 256
STATS_DIM = 32
NMS_THRESHOLD = 0.25


class SceneLoadError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass
class Box3D:
    center: np.ndarray
    size: np.ndarray
    class_scores: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        if not np.all(self.size > 0):
            raise GeometryError(f"box size must be positive, got {self.size.tolist()}")

    @property
    def params(self) -> np.ndarray:
        """center, size and class scores: 6 + C values."""
        return np.concatenate([self.center, self.size, self.class_scores])

    @property
    def min(self) -> np.ndarray:
        return self.center - self.size / 2

    @property
    def max(self) -> np.ndarray:
        return self.center + self.size / 2

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "size": self.size.tolist()}


@dataclass
class Scene:
    scene_id: str
    points: np.ndarray  # (N, 9): xyz, rgb, normal
    gt_classes: list[int]
    gt_boxes: list[Box3D]
    instance: np.ndarray | None = None  # (N,) object index per point, -1 for none

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.instance is None:
            self.instance = assign_instances(self.points, self.gt_boxes)
        self._feature_points = None

    @property
    def feature_points(self) -> np.ndarray:
        """Fixed-size point subsample that proposal and region features pool over.

        The subset depends only on the scene id and point count, so augmented
        copies of a scene keep the same points.
        """
        if self._feature_points is None:
            n = len(self.points)
            if n <= MAX_FEATURE_POINTS:
                self._feature_points = self.points
            else:
                rng = np.random.default_rng(zlib.crc32(self.scene_id.encode()))
                keep = np.sort(rng.choice(n, MAX_FEATURE_POINTS, replace=False))
                self._feature_points = self.points[keep]
        return self._feature_points

    @property
    def gt_objects(self) -> list[tuple[int, Box3D]]:
        return list(zip(self.gt_classes, self.gt_boxes))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        xyz = self.points[:, :3]
        return xyz.min(axis=0), xyz.max(axis=0)

    @property
    def centroid(self) -> np.ndarray:
        return self.points[:, :3].mean(axis=0)

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "points": self.points.tolist(),
            "objects": [{"class_id": int(c), **b.to_dict()} for c, b in self.gt_objects],
        }


def assign_instances(points: np.ndarray, boxes: list[Box3D]) -> np.ndarray:
    inst = np.full(len(points), -1, dtype=np.int64)
    xyz = points[:, :3]
    for k, b in enumerate(boxes):
        inside = np.all((xyz >= b.min - 1e-9) & (xyz <= b.max + 1e-9), axis=1) & (inst < 0)
        inst[inside] = k
    return inst


# ---------------------------------------------------------------- io

def _fail(path: str, msg: str):
    raise SceneLoadError(f"{path}: {msg}")


def scene_from_dict(data: dict) -> Scene:
    if not isinstance(data, dict):
        _fail("$", "scene must be an object")
    for key in ("scene_id", "points", "objects"):
        if key not in data:
            _fail(key, "missing field")
    try:
        pts = np.asarray(data["points"], dtype=np.float64)
    except (TypeError, ValueError):
        _fail("points", "not a numeric array")
    if pts.ndim != 2 or pts.shape[1] != 9 or len(pts) < 1:
        _fail("points", f"expected N>=1 rows of 9 values, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        _fail("points", "non-finite value")
    norms = np.linalg.norm(pts[:, 6:9], axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-3)
    if bad.size:
        _fail(f"points[{bad[0]}]", "normal is not unit length")
    classes, boxes = [], []
    for i, obj in enumerate(data["objects"]):
        where = f"objects[{i}]"
        for key in ("class_id", "center", "size"):
            if key not in obj:
                _fail(f"{where}.{key}", "missing field")
        center = np.asarray(obj["center"], dtype=np.float64)
        size = np.asarray(obj["size"], dtype=np.float64)
        if center.shape != (3,):
            _fail(f"{where}.center", "expected 3 values")
        if size.shape != (3,):
            _fail(f"{where}.size", "expected 3 values")
        if not np.all(size > 0):
            _fail(f"{where}.size", "all extents must be positive")
        if not 0 <= int(obj["class_id"]) < NUM_CLASSES:
            _fail(f"{where}.class_id", f"outside [0, {NUM_CLASSES})")
        classes.append(int(obj["class_id"]))
        boxes.append(Box3D(center, size))
    scene = Scene(str(data["scene_id"]), pts, classes, boxes)
    counts = np.bincount(scene.instance[scene.instance >= 0], minlength=len(boxes))
    for i, c in enumerate(counts):
        if c == 0:
            _fail(f"objects[{i}]", "box contains no points")
    return scene


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise SceneLoadError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise SceneLoadError(f"{path}: invalid JSON ({exc})") from None
    return scene_from_dict(data)


def save_scene(scene: Scene, path) -> None:
    # repr round-trips float64 exactly
    Path(path).write_text(json.dumps(scene.to_dict()))


# ---------------------------------------------------------------- geometry

def iou(a: Box3D, b: Box3D) -> float:
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(centers_a, sizes_a, centers_b, sizes_b) -> np.ndarray:
    amin, amax = centers_a - sizes_a / 2, centers_a + sizes_a / 2
    bmin, bmax = centers_b - sizes_b / 2, centers_b + sizes_b / 2
    lo = np.maximum(amin[:, None], bmin[None])
    hi = np.minimum(amax[:, None], bmax[None])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    va = np.prod(sizes_a, axis=-1)
    vb = np.prod(sizes_b, axis=-1)
    union = va[:, None] + vb[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(centers, sizes, scores, iou_threshold: float = NMS_THRESHOLD) -> list[int]:
    """Greedy 3D NMS. Order by descending score, ties by lower index."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 3)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(centers):
        raise GeometryError("boxes and scores differ in length")
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = iou_matrix(centers, sizes, centers, sizes)
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return keep


def covering_box(c1, s1, c2, s2) -> tuple[np.ndarray, np.ndarray]:
    lo = np.minimum(c1 - s1 / 2, c2 - s2 / 2)
    hi = np.maximum(c1 + s1 / 2, c2 + s2 / 2)
    return (lo + hi) / 2, hi - lo


def clamp_boxes(centers, sizes, lo, hi, min_size: float = 1e-3):
    """Intersect boxes with [lo, hi], keeping at least ``min_size`` per side."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    bmin = np.clip(centers - sizes / 2, lo, hi - min_size)
    bmax = np.clip(centers + sizes / 2, bmin + min_size, hi)
    return (bmin + bmax) / 2, bmax - bmin


# ---------------------------------------------------------------- features

def inside_mask(xyz: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """(M, N) bool: point n lies in closed box m.

    ``tol`` absorbs rounding in center +- size / 2 so boundary points count.
    """
    lo = np.atleast_2d(lo) - tol
    hi = np.atleast_2d(hi) + tol
    inside = (xyz[None, :, 0] >= lo[:, None, 0]) & (xyz[None, :, 0] <= hi[:, None, 0])
    for a in (1, 2):
        inside &= (xyz[None, :, a] >= lo[:, None, a]) & (xyz[None, :, a] <= hi[:, None, a])
    return inside


def inside_pairs(xyz: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float = 1e-9):
    """(box, point) index pairs for points inside each closed box, sorted by box."""
    return np.nonzero(inside_mask(xyz, lo, hi, tol))


def _segment_reduce(ufunc, values, rows, n_rows, fill):
    out = np.full((n_rows,) + values.shape[1:], fill, dtype=np.float64)
    if len(rows) == 0:
        return out
    starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    out[rows[starts]] = ufunc.reduceat(values, starts, axis=0)
    return out


def box_point_stats(points: np.ndarray, centers: np.ndarray, sizes: np.ndarray):
    """Fixed-length summaries of the points inside each box.

    Returns (stats (M, STATS_DIM), empty (M,) bool).
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    sizes = np.atleast_2d(np.asarray(sizes, dtype=np.float64))
    M = len(centers)
    xyz = points[:, :3]
    inside = inside_mask(xyz, centers - sizes / 2, centers + sizes / 2)
    counts = inside.sum(axis=1).astype(np.float64)
    empty = counts == 0
    denom = np.maximum(counts, 1.0)[:, None]
    # dense (M, N) x (N, 18) product instead of gathering every (box, point) pair
    sums = inside.astype(np.float64) @ np.concatenate([points, points * points], axis=1)
    mean = sums[:, :9] / denom
    var = np.clip(sums[:, 9:] / denom - mean ** 2, 0.0, None)
    xt = np.ascontiguousarray(xyz.T)[:, None, :]  # (3, 1, N): reduce along the contiguous axis
    mn = np.where(inside[None], xt, np.inf).min(axis=2).T
    mx = np.where(inside[None], xt, -np.inf).max(axis=2).T
    mn = np.where(empty[:, None], centers, mn)
    mx = np.where(empty[:, None], centers, mx)
    stats = np.zeros((M, STATS_DIM))
    stats[:, 0] = np.log1p(counts) / np.log(1000.0)
    stats[:, 1] = empty
    stats[:, 2:5] = (mean[:, :3] - centers) / sizes
    stats[:, 5:8] = var[:, :3] / sizes ** 2
    stats[:, 8:11] = (mn - centers) / sizes
    stats[:, 11:14] = (mx - centers) / sizes
    stats[:, 14:17] = mean[:, 3:6]
    stats[:, 17:20] = var[:, 3:6]
    stats[:, 20:23] = mean[:, 6:9]
    stats[:, 23:26] = var[:, 6:9]
    stats[:, 26:29] = mean[:, :3]  # absolute position channels
    stats[:, 29:32] = np.log(sizes)
    stats[empty, 2:29] = 0.0
    return stats, empty


def objectness_from_points(points, centers, sizes, grid: int = 4, min_count: int = 1) -> np.ndarray:
    """Fraction of a box's grid cells holding at least ``min_count`` points."""
    centers = np.atleast_2d(centers)
    sizes = np.atleast_2d(sizes)
    lo = centers - sizes / 2
    rows, cols = inside_pairs(points[:, :3], lo, centers + sizes / 2)
    rel = (points[cols, :3] - lo[rows]) / sizes[rows]
    cell = np.clip((rel * grid).astype(np.int64), 0, grid - 1)
    flat = rows * grid ** 3 + cell[:, 0] * grid * grid + cell[:, 1] * grid + cell[:, 2]
    uniq, counts = np.unique(flat, return_counts=True)
    occupied = uniq[counts >= min_count] // grid ** 3
    return np.bincount(occupied, minlength=len(centers)) / grid ** 3


def spatial_features(centers, sizes, lo, hi, centroid) -> tuple[np.ndarray, np.ndarray]:
    """Scene-normalized geometry (S_b: size + volume) and location (L_b)."""
    extent = np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)
    if np.any(extent <= 0):
        raise GeometryError("scene bounds have zero extent")
    centers = np.atleast_2d(centers)
    sizes = np.atleast_2d(sizes)
    s_b = np.concatenate([sizes / extent, (np.prod(sizes, axis=1) / np.prod(extent))[:, None]], axis=1)
    l_b = np.concatenate([(centers - lo) / extent, (centers - centroid) / extent], axis=1)
    return s_b, l_b


SPATIAL_DIM = 10
MAX_FEATURE_POINTS = 1024


def appearance_feature(store, stats, width: int = 256):
    """Project point statistics of one or many boxes to the appearance width."""
    from .diffkernel import Tensor, dense
    return dense(store, Tensor(np.atleast_2d(stats)), "appearance/proj", width)


# ---------------------------------------------------------------- proposals

@dataclass
class Proposals:
    centers: np.ndarray  # (K, 3)
    sizes: np.ndarray  # (K, 3)
    stats: np.ndarray  # (K, STATS_DIM)
    empty: np.ndarray  # (K,)
    objectness: np.ndarray  # (K,)
    source: np.ndarray  # (K,) gt object index or -1
    spatial: np.ndarray  # (K, SPATIAL_DIM)

    def __len__(self) -> int:
        return len(self.centers)

    def box(self, i: int) -> Box3D:
        return Box3D(self.centers[i], self.sizes[i])


def random_boxes(rng, lo, hi, n, size_range=(0.2, 1.5)):
    sizes = rng.uniform(size_range[0], size_range[1], size=(n, 3))
    sizes = np.minimum(sizes, np.maximum(hi - lo, 1e-2))
    centers = rng.uniform(lo + sizes / 2, np.maximum(hi - sizes / 2, lo + sizes / 2))
    return centers, sizes


def generate_proposals(scene: Scene, mode: str = "gt", rng=None, k_o: int = K_PROPOSALS,
                       center_sigma: float = 0.1, size_jitter: tuple[float, float] = (0.85, 1.15),
                       shuffle: bool = True) -> Proposals:
    """Stand-in for a learned detector: ground-truth, jittered or random boxes."""
    if mode not in {"gt", "jitter", "random"}:
        from .diffkernel import ConfigurationError
        raise ConfigurationError(f"unknown proposal mode {mode!r}")
    n_obj = len(scene.gt_boxes)
    if k_o < n_obj:
        from .diffkernel import ConfigurationError
        raise ConfigurationError(f"K_o={k_o} is smaller than the object count {n_obj}")
    rng = np.random.default_rng(rng)
    lo, hi = scene.bounds
    if mode == "random":
        centers, sizes = random_boxes(rng, lo, hi, k_o)
        source = np.full(k_o, -1)
    else:
        gc = np.array([b.center for b in scene.gt_boxes]).reshape(-1, 3)
        gs = np.array([b.size for b in scene.gt_boxes]).reshape(-1, 3)
        if mode == "jitter":
            gc = gc + rng.normal(0.0, center_sigma, size=gc.shape)
            gs = gs * rng.uniform(size_jitter[0], size_jitter[1], size=gs.shape)
        dc, ds = random_boxes(rng, lo, hi, k_o - n_obj)
        centers = np.concatenate([gc, dc])
        sizes = np.concatenate([gs, ds])
        source = np.concatenate([np.arange(n_obj), np.full(k_o - n_obj, -1)])
    if shuffle:
        perm = rng.permutation(k_o)
        centers, sizes, source = centers[perm], sizes[perm], source[perm]
    return make_proposals(scene, centers, sizes, source)


def make_proposals(scene: Scene, centers, sizes, source=None) -> Proposals:
    centers = np.asarray(centers, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    stats, empty = box_point_stats(scene.feature_points, centers, sizes)
    lo, hi = scene.bounds
    s_b, l_b = spatial_features(centers, sizes, lo, hi, scene.centroid)
    if source is None:
        source = np.full(len(centers), -1)
    return Proposals(centers, sizes, stats, empty,
                     objectness_from_points(scene.feature_points, centers, sizes),
                     np.asarray(source), np.concatenate([s_b, l_b], axis=1))


# ---------------------------------------------------------------- augmentation

@dataclass
class Augmentation:
    flip_x: bool = False  # mirror x (exchanges left and right)
    flip_y: bool = False  # mirror y (exchanges front and back)
    angle: float = 0.0  # radians about the vertical axis
    scale: float = 1.0

    @classmethod
    def sample(cls, rng, flip_prob: float = 0.5, max_angle_deg: float = 30.0,
               scale_range: tuple[float, float] = (0.9, 1.1)) -> "Augmentation":
        rng = np.random.default_rng(rng)
        fx, fy = (bool(v) for v in rng.random(2) < flip_prob)
        angle = float(np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg)))
        return cls(fx, fy, angle, float(rng.uniform(*scale_range)))


def augment_with(scene: Scene, aug: Augmentation) -> Scene:
    """Flip, rotate about the vertical axis through the centroid, then scale.

    Boxes are recomputed as the axis-aligned bounds of each object's moved points.
    """
    pts = scene.points.copy()
    pivot = scene.centroid.copy()
    pivot[2] = 0.0
    xyz = pts[:, :3] - pivot
    nrm = pts[:, 6:9].copy()
    for axis, flip in ((0, aug.flip_x), (1, aug.flip_y)):
        if flip:
            xyz[:, axis] = -xyz[:, axis]
            nrm[:, axis] = -nrm[:, axis]
    c, s = np.cos(aug.angle), np.sin(aug.angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    xyz = xyz @ rot.T * aug.scale + pivot
    nrm = nrm @ rot.T
    pts[:, :3] = xyz
    pts[:, 6:9] = nrm
    boxes = []
    for k in range(len(scene.gt_boxes)):
        m = scene.instance == k
        lo, hi = xyz[m].min(axis=0), xyz[m].max(axis=0)
        boxes.append(Box3D((lo + hi) / 2, np.maximum(hi - lo, 1e-6)))
    return Scene(scene.scene_id, pts, list(scene.gt_classes), boxes, scene.instance.copy())


def augment(scene: Scene, rng, flip_prob: float = 0.5, max_angle_deg: float = 30.0,
            scale_range: tuple[float, float] = (0.9, 1.1)) -> Scene:
    """Random flips in both horizontal directions, Z rotation and global scale."""
    return augment_with(scene, Augmentation.sample(rng, flip_prob, max_angle_deg, scale_range))
