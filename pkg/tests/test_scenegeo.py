import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ground3d.diffkernel import ConfigurationError
from ground3d.scenegeo import (MAX_FEATURE_POINTS, STATS_DIM, Augmentation, Box3D, GeometryError,
                               Scene, SceneLoadError, augment, augment_with, box_point_stats,
                               clamp_boxes, covering_box, generate_proposals, inside_pairs, iou,
                               iou_matrix, load_scene, nms, objectness_from_points, save_scene,
                               scene_from_dict, spatial_features)


def random_box(rng, lo=0.0, hi=2.0):
    c = rng.uniform(lo + 0.5, hi - 0.5, 3)
    return Box3D(c, rng.uniform(0.1, 1.0, 3))


def mc_iou(a: Box3D, b: Box3D, n: int, rng) -> float:
    """Volume oracle: sample the joint bounding volume uniformly."""
    lo, hi = np.minimum(a.min, b.min), np.maximum(a.max, b.max)
    p = rng.uniform(lo, hi, size=(n, 3))
    ia = np.all((p >= a.min) & (p <= a.max), axis=1)
    ib = np.all((p >= b.min) & (p <= b.max), axis=1)
    union = np.sum(ia | ib)
    return float(np.sum(ia & ib) / union) if union else 0.0


def brute_nms(centers, sizes, scores, thr):
    """Exhaustive reference: repeatedly take the best remaining box, drop overlaps."""
    boxes = [Box3D(c, s) for c, s in zip(centers, sizes)]
    alive = list(range(len(boxes)))
    keep = []
    while alive:
        best = max(alive, key=lambda i: (scores[i], -i))
        keep.append(best)
        alive = [i for i in alive if i != best and iou(boxes[i], boxes[best]) <= thr]
    return keep


def small_scene(seed=0) -> Scene:
    rng = np.random.default_rng(seed)
    pts, boxes = [], []
    for k, c in enumerate([(1, 1, 0.5), (3, 1, 0.5), (2, 3, 0.4)]):
        xyz = rng.uniform(np.array(c) - 0.3, np.array(c) + 0.3, size=(60, 3))
        nrm = rng.normal(size=(60, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        rgb = np.full((60, 3), 0.1 * (k + 1))
        pts.append(np.concatenate([xyz, rgb, nrm], axis=1))
        boxes.append(Box3D((xyz.min(0) + xyz.max(0)) / 2, xyz.max(0) - xyz.min(0)))
    return Scene("tiny", np.concatenate(pts), [3, 5, 3], boxes)


# ---------------------------------------------------------------- IoU

def test_iou_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = random_box(rng), random_box(rng)
        b.center = a.center + rng.uniform(-0.3, 0.3, 3)
        assert abs(iou(a, b) - mc_iou(a, b, 200_000, rng)) < 0.01


def test_iou_identity_disjoint_and_nested():
    a = Box3D([0, 0, 0], [1, 1, 1])
    assert iou(a, a) == 1.0
    assert iou(a, Box3D([5, 5, 5], [1, 1, 1])) == 0.0
    assert iou(a, Box3D([0, 0, 0], [0.5, 0.5, 0.5])) == pytest.approx(0.125)
    assert iou(a, Box3D([1, 0, 0], [1, 1, 1])) == 0.0  # touching faces


def test_iou_matrix_agrees_with_pairwise():
    rng = np.random.default_rng(1)
    A = [random_box(rng) for _ in range(5)]
    B = [random_box(rng) for _ in range(4)]
    m = iou_matrix(np.array([b.center for b in A]), np.array([b.size for b in A]),
                   np.array([b.center for b in B]), np.array([b.size for b in B]))
    ref = np.array([[iou(a, b) for b in B] for a in A])
    np.testing.assert_allclose(m, ref, atol=1e-12)


def test_box_rejects_nonpositive_size():
    with pytest.raises(GeometryError):
        Box3D([0, 0, 0], [1, 0, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng), random_box(rng)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 and v == pytest.approx(iou(b, a), abs=1e-15)


# ---------------------------------------------------------------- NMS

def test_nms_matches_exhaustive_reference():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 16))
        c = rng.uniform(0, 2, (n, 3))
        s = rng.uniform(0.2, 1.2, (n, 3))
        scores = rng.random(n).round(1)  # deliberate ties
        assert nms(c, s, scores, 0.25) == brute_nms(c, s, scores, 0.25)


def test_nms_edge_cases():
    c = np.zeros((3, 3))
    s = np.ones((3, 3))
    assert nms(c, s, [0.1, 0.9, 0.5], 0.25) == [1]
    assert nms(c, s, [0.5, 0.5, 0.5], 1.0) == [0, 1, 2]
    assert nms(np.zeros((0, 3)), np.zeros((0, 3)), [], 0.25) == []
    with pytest.raises(GeometryError):
        nms(c, s, [0.1], 0.25)


# ---------------------------------------------------------------- helpers

def test_covering_box_contains_both():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = random_box(rng), random_box(rng)
        c, s = covering_box(a.center, a.size, b.center, b.size)
        cov = Box3D(c, s)
        assert np.all(cov.min <= np.minimum(a.min, b.min) + 1e-12)
        assert np.all(cov.max >= np.maximum(a.max, b.max) - 1e-12)


def test_clamp_keeps_boxes_inside_bounds():
    c, s = clamp_boxes(np.array([[0.0, 0, 0], [5, 5, 5]]), np.ones((2, 3)), np.zeros(3), np.full(3, 2.0))
    assert np.all(c - s / 2 >= -1e-12) and np.all(c + s / 2 <= 2.0 + 1e-12)
    assert np.all(s > 0)


def test_inside_pairs_matches_dense_mask():
    rng = np.random.default_rng(4)
    xyz = rng.uniform(0, 3, (500, 3))
    lo = rng.uniform(0, 2, (40, 3))
    hi = lo + rng.uniform(0, 1.5, (40, 3))
    rows, cols = inside_pairs(xyz, lo, hi)
    ref = {(i, j) for i in range(40) for j in range(500)
           if np.all(xyz[j] >= lo[i]) and np.all(xyz[j] <= hi[i])}
    assert set(zip(rows.tolist(), cols.tolist())) == ref
    assert np.all(np.diff(rows) >= 0)


def test_box_point_stats_matches_per_box_summary():
    scene = small_scene()
    c = np.array([b.center for b in scene.gt_boxes] + [[9.0, 9, 9]])
    s = np.array([b.size for b in scene.gt_boxes] + [[0.5, 0.5, 0.5]])
    stats, empty = box_point_stats(scene.points, c, s)
    assert stats.shape == (4, STATS_DIM)
    assert empty.tolist() == [False, False, False, True]
    for k in range(3):
        inside = scene.points[scene.instance == k]
        np.testing.assert_allclose(stats[k, 14:17], inside[:, 3:6].mean(0), atol=1e-12)
        np.testing.assert_allclose(stats[k, 26:29], inside[:, :3].mean(0), atol=1e-12)
        np.testing.assert_allclose(stats[k, 0], np.log1p(len(inside)) / np.log(1000.0))
        np.testing.assert_allclose(stats[k, 8:11], (inside[:, :3].min(0) - c[k]) / s[k], atol=1e-12)
    assert np.all(stats[3, 2:29] == 0)


def test_objectness_in_unit_interval_and_empty_is_zero():
    scene = small_scene()
    c = np.array([scene.gt_boxes[0].center, [9.0, 9, 9]])
    s = np.array([scene.gt_boxes[0].size, [1.0, 1, 1]])
    obj = objectness_from_points(scene.points, c, s)
    assert 0 < obj[0] <= 1 and obj[1] == 0


def test_spatial_features_layout():
    lo, hi = np.zeros(3), np.array([4.0, 2.0, 1.0])
    s_b, l_b = spatial_features(np.array([[2.0, 1, 0.5]]), np.array([[2.0, 1, 0.5]]), lo, hi,
                                np.array([1.0, 1.0, 0.5]))
    np.testing.assert_allclose(s_b, [[0.5, 0.5, 0.5, 0.125]])
    np.testing.assert_allclose(l_b, [[0.5, 0.5, 0.5, 0.25, 0.0, 0.0]])
    with pytest.raises(GeometryError):
        spatial_features(np.zeros((1, 3)), np.ones((1, 3)), lo, lo, lo)


# ---------------------------------------------------------------- proposals

def test_gt_proposals_contain_each_gt_box_once():
    scene = small_scene()
    p = generate_proposals(scene, "gt", 0, 16)
    assert len(p) == 16
    for k, b in enumerate(scene.gt_boxes):
        hits = np.flatnonzero(np.all(np.isclose(p.centers, b.center), axis=1)
                              & np.all(np.isclose(p.sizes, b.size), axis=1))
        assert len(hits) == 1 and p.source[hits[0]] == k
    assert np.all((p.objectness >= 0) & (p.objectness <= 1))


def test_jitter_reproducible_and_random_inside_bounds():
    scene = small_scene()
    a = generate_proposals(scene, "jitter", 5, 32)
    b = generate_proposals(scene, "jitter", 5, 32)
    assert np.array_equal(a.centers, b.centers) and np.array_equal(a.stats, b.stats)
    r = generate_proposals(scene, "random", 1, 32)
    lo, hi = scene.bounds
    assert np.all(r.centers - r.sizes / 2 >= lo - 1e-9) and np.all(r.centers + r.sizes / 2 <= hi + 1e-9)
    assert np.all(r.source == -1)


def test_proposal_errors():
    scene = small_scene()
    with pytest.raises(ConfigurationError):
        generate_proposals(scene, "votenet", 0, 16)
    with pytest.raises(ConfigurationError):
        generate_proposals(scene, "gt", 0, 2)


def test_feature_points_fixed_subsample():
    scene = small_scene()
    assert scene.feature_points is scene.points  # small scenes keep every point
    big = Scene("big", np.tile(scene.points, (8, 1)), scene.gt_classes, scene.gt_boxes)
    fp = big.feature_points
    assert len(fp) == MAX_FEATURE_POINTS
    again = Scene("big", big.points, scene.gt_classes, scene.gt_boxes).feature_points
    assert np.array_equal(fp, again)


# ---------------------------------------------------------------- augmentation

def test_identity_augmentation_leaves_scene_unchanged():
    scene = small_scene()
    out = augment_with(scene, Augmentation())
    np.testing.assert_allclose(out.points, scene.points, atol=1e-12)
    for a, b in zip(out.gt_boxes, scene.gt_boxes):
        np.testing.assert_allclose(a.center, b.center, atol=1e-12)


def test_augmented_boxes_are_point_bounds():
    scene = small_scene()
    out = augment(scene, 3)
    for k, b in enumerate(out.gt_boxes):
        xyz = out.points[out.instance == k, :3]
        np.testing.assert_allclose(b.min, xyz.min(0), atol=1e-12)
        np.testing.assert_allclose(b.max, xyz.max(0), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(out.points[:, 6:9], axis=1), 1.0, atol=1e-9)


def test_flip_x_mirrors_left_right_order():
    scene = small_scene()
    out = augment_with(scene, Augmentation(flip_x=True))
    assert scene.gt_boxes[0].center[0] < scene.gt_boxes[1].center[0]
    assert out.gt_boxes[0].center[0] > out.gt_boxes[1].center[0]
    out = augment_with(scene, Augmentation(flip_y=True))
    assert out.gt_boxes[2].center[1] < out.gt_boxes[0].center[1]


def test_augmentation_ranges():
    for seed in range(50):
        a = Augmentation.sample(seed)
        assert abs(a.angle) <= np.deg2rad(30) and 0.9 <= a.scale <= 1.1


# ---------------------------------------------------------------- io

def test_scene_round_trip(tmp_path):
    scene = small_scene()
    save_scene(scene, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    assert back.points.tobytes() == scene.points.tobytes()
    assert back.gt_classes == scene.gt_classes


@pytest.mark.parametrize("mutate,where", [
    (lambda d: d.pop("points"), "points"),
    (lambda d: d["points"][0].__setitem__(6, 5.0), "points[0]"),
    (lambda d: d["objects"][1].__setitem__("size", [1, -1, 1]), "objects[1].size"),
    (lambda d: d["objects"][0].__setitem__("center", [50, 50, 50]), "objects[0]"),
    (lambda d: d["objects"][0].__setitem__("class_id", 99), "objects[0].class_id"),
])
def test_scene_validation_names_the_field(mutate, where):
    d = json.loads(json.dumps(small_scene().to_dict()))
    mutate(d)
    with pytest.raises(SceneLoadError, match=r"^" + where.replace("[", r"\[").replace("]", r"\]")):
        scene_from_dict(d)


def test_load_missing_and_malformed(tmp_path):
    with pytest.raises(SceneLoadError, match="not found"):
        load_scene(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(SceneLoadError, match="invalid JSON"):
        load_scene(tmp_path / "bad.json")
