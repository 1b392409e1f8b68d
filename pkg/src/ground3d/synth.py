"""Synthetic indoor scenes with templated referring descriptions."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffkernel import ConfigurationError
from .scenegeo import Box3D, Scene, load_scene, save_scene

# class_id -> (canonical noun, base size w/d/h in meters, base elevation)
CLASS_SHAPES = {
    0: ("cabinet", (0.9, 0.6, 1.1), 0.0),
    1: ("bed", (2.0, 1.6, 0.6), 0.0),
    2: ("chair", (0.6, 0.6, 1.0), 0.0),
    3: ("sofa", (1.9, 0.9, 0.8), 0.0),
    4: ("table", (1.3, 0.8, 0.75), 0.0),
    5: ("door", (0.9, 0.15, 2.0), 0.0),
    6: ("window", (1.1, 0.15, 1.0), 0.9),
    7: ("bookshelf", (1.0, 0.4, 1.8), 0.0),
    8: ("picture", (0.8, 0.1, 0.6), 1.2),
    9: ("counter", (1.8, 0.6, 0.9), 0.0),
    10: ("desk", (1.2, 0.7, 0.75), 0.0),
    11: ("curtain", (1.5, 0.15, 2.0), 0.0),
    12: ("refrigerator", (0.8, 0.7, 1.8), 0.0),
    13: ("toilet", (0.5, 0.7, 0.8), 0.0),
    14: ("sink", (0.6, 0.5, 0.4), 0.5),
    15: ("bathtub", (1.6, 0.8, 0.6), 0.0),
    16: ("shoe", (0.5, 0.4, 0.3), 0.0),
    17: ("lamp", (0.5, 0.5, 1.5), 0.0),
}
PLURAL_ONLY = {16: "shoes"}

COLORS = {
    "white": (0.93, 0.93, 0.93), "black": (0.08, 0.08, 0.08), "brown": (0.45, 0.28, 0.12),
    "red": (0.82, 0.12, 0.10), "blue": (0.15, 0.30, 0.82), "green": (0.15, 0.60, 0.20),
    "yellow": (0.92, 0.85, 0.15), "gray": (0.50, 0.50, 0.50), "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.20, 0.60), "pink": (0.95, 0.60, 0.72), "beige": (0.85, 0.78, 0.62),
}

# spoken form -> canonical relation; the checker defines each predicate
RELATION_FORMS = {
    "right of": ["to the right of", "on the right side of", "right of"],
    "left of": ["to the left of", "on the left side of", "left of"],
    "front of": ["in front of"],
    "behind": ["behind", "in back of"],
    "next to": ["next to", "beside"],
    "near": ["near", "close to"],
    "far from": ["far from", "far away from"],
}
FRONTED = {"right of": "To the right of", "left of": "To the left of", "front of": "In front of"}
NEAR_DIST = 2.0
FAR_DIST = 3.5
AXIS_MARGIN = 0.3


class GenerationError(RuntimeError):
    pass


def relation_holds(canonical: str, src: Box3D, dst: Box3D) -> bool:
    """Room frame: +x is right, +y points away from the viewer."""
    d = src.center - dst.center
    dist = float(np.linalg.norm(d[:2]))
    if canonical == "right of":
        return d[0] > 0
    if canonical == "left of":
        return d[0] < 0
    if canonical == "front of":
        return d[1] < 0
    if canonical == "behind":
        return d[1] > 0
    if canonical in ("next to", "near"):
        return dist < NEAR_DIST
    if canonical == "far from":
        return dist > FAR_DIST
    raise KeyError(canonical)


def _clearly_holds(canonical: str, src: Box3D, dst: Box3D) -> bool:
    d = src.center - dst.center
    dist = float(np.linalg.norm(d[:2]))
    if canonical in ("right of", "left of"):
        return relation_holds(canonical, src, dst) and abs(d[0]) > AXIS_MARGIN
    if canonical in ("front of", "behind"):
        return relation_holds(canonical, src, dst) and abs(d[1]) > AXIS_MARGIN
    if canonical in ("next to", "near"):
        return dist < NEAR_DIST - 0.3
    return dist > FAR_DIST + 0.3


@dataclass
class SynthConfig:
    num_scenes: int = 250
    objects_range: tuple[int, int] = (4, 10)
    room_extent: tuple[float, float] = (7.0, 6.0)
    classes: tuple[int, ...] = tuple(range(18))
    points_range: tuple[int, int] = (200, 500)
    floor_points: int = 300
    multiple_fraction: float = 0.5
    relation_disambiguation: float = 0.4  # share of "multiple" targets told apart by relation only
    descriptions_per_scene: int = 1
    val_scenes: int = 50
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown synth config keys: {sorted(unknown)}")
        for key in ("objects_range", "room_extent", "classes", "points_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Sample:
    scene: Scene
    description: str
    target_index: int
    target_class: int
    split: str = "train"
    subset: str = "unique"
    relations: list[tuple[int, str, int]] = field(default_factory=list)
    scene_path: str | None = None

    @property
    def target_box(self) -> Box3D:
        return self.scene.gt_boxes[self.target_index]

    def manifest_row(self) -> dict:
        return {
            "scene": self.scene_path,
            "description": self.description,
            "target_class": self.target_class,
            "target_box": self.target_box.to_dict(),
            "target_index": self.target_index,
            "split": self.split,
            "subset": self.subset,
            "relations": [list(r) for r in self.relations],
        }


@dataclass
class Corpus:
    samples: list[Sample]

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def save(self, directory) -> Path:
        directory = Path(directory)
        (directory / "scenes").mkdir(parents=True, exist_ok=True)
        written = set()
        rows = []
        for s in self.samples:
            rel = f"scenes/{s.scene.scene_id}.json"
            if rel not in written:
                save_scene(s.scene, directory / rel)
                written.add(rel)
            s.scene_path = rel
            rows.append(json.dumps(s.manifest_row()))
        manifest = directory / "corpus.jsonl"
        manifest.write_text("\n".join(rows) + "\n")
        return manifest

    @classmethod
    def load(cls, manifest) -> "Corpus":
        manifest = Path(manifest)
        cache: dict[str, Scene] = {}
        samples = []
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            path = row["scene"]
            if path not in cache:
                cache[path] = load_scene(manifest.parent / path)
            scene = cache[path]
            idx = row.get("target_index")
            if idx is None:
                tb = Box3D(row["target_box"]["center"], row["target_box"]["size"])
                idx = int(np.argmin([np.abs(b.center - tb.center).sum() + np.abs(b.size - tb.size).sum()
                                     for b in scene.gt_boxes]))
            if scene.gt_classes[idx] != row["target_class"]:
                raise ValueError(f"{path}: target box does not match a {row['target_class']} object")
            samples.append(Sample(scene, row["description"], idx, row["target_class"],
                                  row.get("split", "train"), row.get("subset", "unique"),
                                  [tuple(r) for r in row.get("relations", [])], path))
        return cls(samples)


# ---------------------------------------------------------------- scene synthesis

def _sample_surface(rng, lo, hi, n):
    size = hi - lo
    areas = np.array([size[1] * size[2], size[1] * size[2], size[0] * size[2],
                      size[0] * size[2], size[0] * size[1], size[0] * size[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random((n, 3))
    pts = lo + u * size
    normals = np.zeros((n, 3))
    axis = face // 2
    upper = face % 2 == 1
    pts[np.arange(n), axis] = np.where(upper, hi[axis], lo[axis])
    normals[np.arange(n), axis] = np.where(upper, 1.0, -1.0)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    cn = np.zeros((8, 3))
    cn[:, 2] = np.where(corners[:, 2] == hi[2], 1.0, -1.0)
    return np.concatenate([pts, corners]), np.concatenate([normals, cn])


def _place(rng, cfg: SynthConfig, classes: list[int]):
    W, D = cfg.room_extent
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    for c in classes:
        _, base, elev = CLASS_SHAPES[c]
        size = np.array(base) * rng.uniform(0.9, 1.1, size=3)
        if rng.random() < 0.5 and base[0] > base[1] * 1.5:
            size[[0, 1]] = size[[1, 0]]  # rotate footprint
        if size[0] > W or size[1] > D:
            raise GenerationError(f"class {c} ({size[0]:.2f}x{size[1]:.2f} m) does not fit a {W}x{D} m room")
        for _ in range(200):
            cx = rng.uniform(size[0] / 2, W - size[0] / 2)
            cy = rng.uniform(size[1] / 2, D - size[1] / 2)
            lo = np.array([cx - size[0] / 2, cy - size[1] / 2, elev])
            hi = lo + size
            if all(np.any(lo[:2] > h[:2] + 0.15) or np.any(hi[:2] < l[:2] - 0.15) for l, h in placed):
                placed.append((lo, hi))
                break
        else:
            raise GenerationError(f"could not place {len(classes)} objects in a {W}x{D} m room")
    return placed


def _build_scene(rng, cfg: SynthConfig, scene_id: str, classes: list[int], colors: list[str]) -> Scene:
    placed = _place(rng, cfg, classes)
    chunks, inst = [], []
    for k, ((lo, hi), col) in enumerate(zip(placed, colors)):
        n = int(rng.integers(cfg.points_range[0], cfg.points_range[1] + 1)) - 8
        xyz, nrm = _sample_surface(rng, lo, hi, n)
        rgb = np.clip(np.array(COLORS[col]) + rng.normal(0, 0.03, size=(len(xyz), 3)), 0, 1)
        chunks.append(np.concatenate([xyz, rgb, nrm], axis=1))
        inst.append(np.full(len(xyz), k))
    W, D = cfg.room_extent
    f = cfg.floor_points
    floor = np.zeros((f, 9))
    floor[:, 0] = rng.uniform(0, W, f)
    floor[:, 1] = rng.uniform(0, D, f)
    floor[:, 2] = -0.02
    floor[:, 3:6] = np.clip(0.6 + rng.normal(0, 0.02, size=(f, 1)), 0, 1)
    floor[:, 8] = 1.0
    pts = np.concatenate(chunks + [floor])
    pts[:, :6] = np.round(pts[:, :6], 4)
    instance = np.concatenate(inst + [np.full(f, -1)])
    boxes = []
    for k in range(len(classes)):
        xyz = pts[instance == k, :3]
        lo, hi = xyz.min(axis=0), xyz.max(axis=0)
        boxes.append(Box3D((lo + hi) / 2, hi - lo))
    return Scene(scene_id, pts, list(classes), boxes, instance)


# ---------------------------------------------------------------- descriptions

def _noun(rng, cid: int) -> str:
    return PLURAL_ONLY.get(cid, CLASS_SHAPES[cid][0])


def _np(rng, cid: int, color: str, det: str | None = None) -> str:
    noun = _noun(rng, cid)
    if det is None:
        det = "the" if cid in PLURAL_ONLY else str(rng.choice(["a", "the"]))
    if det == "a" and color[0] in "aeiou":
        det = "an"
    return f"{det} {color} {noun}"


def _relations_for(target: int, scene: Scene, anchors: list[int]) -> list[tuple[str, int]]:
    out = []
    tb = scene.gt_boxes[target]
    for a in anchors:
        for canon in RELATION_FORMS:
            if _clearly_holds(canon, tb, scene.gt_boxes[a]):
                out.append((canon, a))
    return out


def _discriminates(canon: str, anchor: int, target: int, scene: Scene) -> bool:
    tcls = scene.gt_classes[target]
    ab = scene.gt_boxes[anchor]
    return all(not relation_holds(canon, scene.gt_boxes[o], ab)
               for o, c in enumerate(scene.gt_classes) if c == tcls and o != target)


def describe(rng, scene: Scene, colors: list[str], target: int, need_relation: bool):
    """Two or three sentences; the first names the target, later ones use a pronoun."""
    tcls = scene.gt_classes[target]
    counts = np.bincount(scene.gt_classes, minlength=18)
    anchors = [k for k, c in enumerate(scene.gt_classes) if counts[c] == 1 and k != target]
    candidates = _relations_for(target, scene, anchors)
    if need_relation:
        disc = [r for r in candidates if _discriminates(r[0], r[1], target, scene)]
        if not disc:
            return None
        rng.shuffle(disc)
        first = disc[0]
    else:
        if not candidates:
            return None
        first = candidates[int(rng.integers(len(candidates)))]
    rest = [r for r in candidates if r[1] != first[1]]
    rng.shuffle(rest)
    n_rel = int(rng.integers(1, 4))
    chosen = [first] + rest[:n_rel - 1]

    tcol = colors[target]
    subj = _np(rng, tcls, tcol, det=str(rng.choice(["a", "the"])) if tcls not in PLURAL_ONLY else "the")
    subj = subj[0].upper() + subj[1:]
    rels: list[tuple[int, str, int]] = []

    def phrase(rel):
        canon, a = rel
        return f"{rng.choice(RELATION_FORMS[canon])} {_np(rng, scene.gt_classes[a], colors[a])}"

    verb = "are" if tcls in PLURAL_ONLY else "is"
    sentences = []
    canon, a = chosen[0]
    if len(chosen) >= 2 and rng.random() < 0.5:
        sentences.append(f"{subj} {verb} {phrase(chosen[0])} and {phrase(chosen[1])}.")
        rels += [(tcls, chosen[0][0], scene.gt_classes[chosen[0][1]]),
                 (tcls, chosen[1][0], scene.gt_classes[chosen[1][1]])]
        remaining = chosen[2:]
    else:
        sentences.append(f"{subj} {verb} {phrase(chosen[0])}.")
        rels.append((tcls, canon, scene.gt_classes[a]))
        remaining = chosen[1:]
    pron, pverb = ("they", "are") if tcls in PLURAL_ONLY else ("it", "is")
    for canon, a in remaining:
        acls = scene.gt_classes[a]
        # fronted form states the anchor's position relative to the target
        if canon in FRONTED and _clearly_holds(canon, scene.gt_boxes[a], scene.gt_boxes[target]) \
                and rng.random() < 0.5:
            obj = "them" if tcls in PLURAL_ONLY else "it"
            sentences.append(f"{FRONTED[canon]} {obj} is {_np(rng, acls, colors[a], det='a')}.")
            rels.append((acls, canon, tcls))
        else:
            sentences.append(f"{pron.capitalize()} {pverb} {phrase((canon, a))}.")
            rels.append((tcls, canon, acls))
    if len(sentences) < 2 or rng.random() < 0.5:
        sentences.append(f"{pron.capitalize()} {pverb} {tcol}.")
    return " ".join(sentences), rels


def gen_synthetic(config: SynthConfig | None = None) -> Corpus:
    cfg = config or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    samples: list[Sample] = []
    n_val = min(cfg.val_scenes, cfg.num_scenes)
    color_names = list(COLORS)
    for s in range(cfg.num_scenes):
        split = "val" if s >= cfg.num_scenes - n_val else "train"
        for attempt in range(50):
            n_obj = int(rng.integers(cfg.objects_range[0], cfg.objects_range[1] + 1))
            multiple = rng.random() < cfg.multiple_fraction
            tcls = int(rng.choice(cfg.classes))
            others = [c for c in cfg.classes if c != tcls]
            n_same = int(rng.integers(2, 4)) if multiple else 1
            n_same = min(n_same, n_obj - 1)
            rest = list(rng.choice(others, size=n_obj - n_same, replace=False))
            classes = [tcls] * n_same + [int(c) for c in rest]
            order = rng.permutation(len(classes))
            classes = [classes[i] for i in order]
            target = int(np.flatnonzero(np.array(classes) == tcls)[0])
            by_relation = multiple and rng.random() < cfg.relation_disambiguation
            colors = [str(rng.choice(color_names)) for _ in classes]
            for k, c in enumerate(classes):
                if c == tcls and k != target:
                    if by_relation:
                        colors[k] = colors[target]
                    else:
                        colors[k] = str(rng.choice([x for x in color_names if x != colors[target]]))
            try:
                scene = _build_scene(rng, cfg, f"synth{cfg.seed}_{s:04d}", classes, colors)
            except GenerationError:
                if attempt == 49:
                    raise
                continue
            made = []
            for d in range(cfg.descriptions_per_scene):
                out = describe(rng, scene, colors, target, by_relation)
                if out is None:
                    break
                made.append(out)
            if len(made) < cfg.descriptions_per_scene:
                continue
            subset = "multiple" if n_same > 1 else "unique"
            for text, rels in made:
                samples.append(Sample(scene, text, target, tcls, split, subset, rels))
            break
        else:
            raise GenerationError(f"scene {s}: no valid description after 50 attempts")
    return Corpus(samples)


def synth_config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------- palette augmentation

_COLOR_WORD = re.compile(r"\b(" + "|".join(COLORS) + r")\b")


def nearest_color(rgb) -> str:
    names = list(COLORS)
    d = np.linalg.norm(np.array([COLORS[n] for n in names]) - np.asarray(rgb), axis=1)
    return names[int(np.argmin(d))]


def permute_colors(scene: Scene, text: str, rng) -> tuple[Scene, str]:
    """Consistently rename palette colors in a description and repaint the scene to match.

    Each object's palette color is recovered from its mean RGB; the permutation is applied
    as an RGB shift so the per-point noise survives.
    """
    rng = np.random.default_rng(rng)
    names = list(COLORS)
    mapping = dict(zip(names, (names[i] for i in rng.permutation(len(names)))))
    pts = scene.points.copy()
    for k in range(len(scene.gt_boxes)):
        m = scene.instance == k
        if not m.any():
            continue
        old = nearest_color(pts[m, 3:6].mean(axis=0))
        shift = np.array(COLORS[mapping[old]]) - np.array(COLORS[old])
        pts[m, 3:6] = np.clip(pts[m, 3:6] + shift, 0.0, 1.0)
    text = _COLOR_WORD.sub(lambda mt: mapping[mt.group(1)], text)
    text = re.sub(r"\b([Aa]) (?=[aeiou])", r"\1n ", re.sub(r"\b([Aa])n (?=[^aeiou\W])", r"\1 ", text))
    out = Scene(scene.scene_id, pts, list(scene.gt_classes), list(scene.gt_boxes), scene.instance.copy())
    return out, text
