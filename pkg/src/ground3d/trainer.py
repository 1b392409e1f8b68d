"""Composite loss, training loop and Acc@IoU evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .descparser import ParsedDescription, color_words, mirror_description, parse
from .diffkernel import ParamStore, Tensor
from .model import ForwardResult, ModelConfig, forward
from .scenegeo import (Augmentation, Box3D, Scene, augment_with, generate_proposals, iou,
                       iou_matrix)
from .synth import Corpus, Sample, nearest_color, permute_colors

log = logging.getLogger(__name__)

POSITIVE_IOU = 0.5


class DivergenceError(RuntimeError):
    pass


@dataclass
class LossWeights:
    vote: float = 0.0  # no vote regression without the detector backbone
    objectness: float = 0.5
    box: float = 1.0
    semantic: float = 0.1
    description: float = 0.1
    reference: float = 0.1
    color: float = 0.1


@dataclass
class LossBreakdown:
    objectness: Tensor
    box: Tensor
    semantic: Tensor
    description: Tensor
    reference: Tensor
    total: Tensor
    color: Tensor = field(default_factory=lambda: Tensor(0.0))

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).values) for k in
                ("total", "objectness", "box", "semantic", "description", "reference", "color")}


# ---------------------------------------------------------------- helpers

def _gt_arrays(scene: Scene):
    c = np.array([b.center for b in scene.gt_boxes]).reshape(-1, 3)
    s = np.array([b.size for b in scene.gt_boxes]).reshape(-1, 3)
    return c, s


def balanced_bce(logits: Tensor, labels: np.ndarray, hard: np.ndarray | None = None) -> Tensor:
    """Mean BCE per group, averaged over the non-empty groups.

    Groups are positives and negatives. Negatives flagged in ``hard`` form a third group, so the
    few wrong objects weigh as much as all the empty boxes together.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    per = dk.bce_with_logits(logits, labels)
    pos = labels > 0.5
    hard = np.zeros_like(pos) if hard is None else np.asarray(hard, dtype=bool).reshape(pos.shape) & ~pos
    groups = [g for g in (pos, ~pos & ~hard, hard) if g.any()]
    if len(groups) < 2:
        return dk.mean(per)
    w = np.zeros(pos.shape)
    for g in groups:
        w[g] = 1.0 / (len(groups) * g.sum())
    return dk.sum(dk.mul(per, w))


def box_regression(centers: Tensor, sizes: Tensor, gt_centers: np.ndarray, gt_sizes: np.ndarray) -> Tensor:
    """Smooth-L1 over center and size, summed over the 6 parameters, mean over boxes."""
    n = centers.shape[0]
    if n == 0:
        return Tensor(0.0)
    diff = dk.concat([dk.sub(centers, gt_centers), dk.sub(sizes, gt_sizes)], axis=1)
    return dk.mul(dk.sum(dk.smooth_l1(diff)), 1.0 / n)


def pair_labels(result: ForwardResult, scene: Scene, target: int):
    """Phi^1 labels (I, K) and the gt object each positive pair regresses toward."""
    props = result.proposals
    gc, gs = _gt_arrays(scene)
    ious = iou_matrix(props.centers, props.sizes, gc, gs)  # (K, G)
    best = ious.argmax(axis=1)
    matched = ious[np.arange(len(best)), best] > POSITIVE_IOU
    classes = np.array(scene.gt_classes)
    phrases = result.parsed.noun_phrases
    labels = np.zeros((len(phrases), len(props)))
    goal = np.full((len(phrases), len(props)), -1)
    for p in phrases:
        if p.is_subject:
            pos = ious[:, target] > POSITIVE_IOU
            goal[p.phrase_index, pos] = target
        else:
            pos = matched & (classes[best] == p.class_id)
            goal[p.phrase_index, pos] = best[pos]
        labels[p.phrase_index] = pos
    return labels, goal


def node_labels(result: ForwardResult, scene: Scene, target: int) -> np.ndarray:
    vis = result.visual
    gc, gs = _gt_arrays(scene)
    ious = iou_matrix(vis.centers, vis.sizes, gc, gs)
    classes = np.array(scene.gt_classes)
    phrase_cls = np.array([p.class_id for p in result.parsed.noun_phrases])
    subj = result.parsed.subject.phrase_index
    out = np.zeros(len(vis.node_phrase))
    for k, ph in enumerate(vis.node_phrase):
        if ph == subj:
            out[k] = ious[k, target] > POSITIVE_IOU
        else:
            same = classes == phrase_cls[ph]
            out[k] = bool(same.any() and ious[k, same].max() > POSITIVE_IOU)
    return out


def object_colors(scene: Scene) -> np.ndarray:
    """Color label per gt object: the palette color nearest its mean point color (-1 if unknown)."""
    words = color_words()
    out = np.full(len(scene.gt_boxes), -1)
    if scene.instance is None:
        return out
    for k in range(len(out)):
        m = scene.instance == k
        if m.any():
            out[k] = words.index(nearest_color(scene.points[m, 3:6].mean(axis=0)))
    return out


def phrase_colors(parsed: ParsedDescription) -> np.ndarray:
    """Color label per noun phrase when it names exactly one color, else -1."""
    words = color_words()
    out = np.full(len(parsed.noun_phrases), -1)
    for p in parsed.noun_phrases:
        named = {words.index(a.lemma) for a in p.attributes if a.lemma in words}
        if len(named) == 1:
            out[p.phrase_index] = named.pop()
    return out


def loss_color(result: ForwardResult, scene: Scene, matched: np.ndarray, best: np.ndarray) -> Tensor:
    """Color cross-entropy on proposals matching an object and on phrases naming a color."""
    terms = []
    if result.color_logits is not None:
        labels = object_colors(scene)[best]
        idx = np.flatnonzero(matched & (labels >= 0))
        if len(idx):
            terms.append(dk.mean(dk.cross_entropy(dk.take(result.color_logits, idx), labels[idx])))
    if result.phrase_color_logits is not None:
        labels = phrase_colors(result.parsed)
        idx = np.flatnonzero(labels >= 0)
        if len(idx):
            terms.append(dk.mean(dk.cross_entropy(dk.take(result.phrase_color_logits, idx),
                                                  labels[idx])))
    total = Tensor(0.0)
    for t in terms:
        total = dk.add(total, t)
    return total


# ---------------------------------------------------------------- losses

def on_objects(centers, sizes, scene: Scene) -> np.ndarray:
    """Boxes matching some gt object. As negatives they are the hard ones (wrong object, not empty space)."""
    gc, gs = _gt_arrays(scene)
    if len(gc) == 0 or len(centers) == 0:
        return np.zeros(len(centers), dtype=bool)
    return iou_matrix(centers, sizes, gc, gs).max(axis=1) > POSITIVE_IOU


def loss_reference(result: ForwardResult, scene: Scene, target: int) -> Tensor:
    """BCE on both matching scores plus smooth-L1 on offset-refined boxes of positive pairs."""
    labels, goal = pair_labels(result, scene, target)
    hard = np.broadcast_to(on_objects(result.proposals.centers, result.proposals.sizes, scene),
                           labels.shape)
    terms = [balanced_bce(result.phi1_logits, labels, hard)]
    if result.phi2_logits is not None and result.phi2_logits.shape[0]:
        vis = result.visual
        terms.append(balanced_bce(result.phi2_logits, node_labels(result, scene, target),
                                  on_objects(vis.centers, vis.sizes, scene)))
    ii, jj = np.nonzero(goal >= 0)
    if len(ii):
        props = result.proposals
        off = dk.reshape(result.offsets, (-1, 6))
        flat = ii * len(props) + jj
        sel = dk.take(off, flat)
        centers = dk.add(sel[:, :3], props.centers[jj])
        sizes = dk.mul(dk.exp(sel[:, 3:]), props.sizes[jj])
        gc, gs = _gt_arrays(scene)
        terms.append(box_regression(centers, sizes, gc[goal[ii, jj]], gs[goal[ii, jj]]))
    total = terms[0]
    for t in terms[1:]:
        total = dk.add(total, t)
    return total


def loss_components(result: ForwardResult, scene: Scene, target: int,
                    weights: LossWeights | None = None) -> LossBreakdown:
    w = weights or LossWeights()
    props = result.proposals
    gc, gs = _gt_arrays(scene)
    ious = iou_matrix(props.centers, props.sizes, gc, gs)
    best = ious.argmax(axis=1)
    pos = ious[np.arange(len(best)), best] > POSITIVE_IOU

    l_obj = dk.mean(dk.bce_with_logits(result.objectness_logits, pos.astype(np.float64)))
    idx = np.flatnonzero(pos)
    if len(idx):
        d = dk.take(result.box_deltas, idx)
        centers = dk.add(d[:, :3], props.centers[idx])
        sizes = dk.mul(dk.exp(d[:, 3:]), props.sizes[idx])
        l_box = box_regression(centers, sizes, gc[best[idx]], gs[best[idx]])
        classes = np.array(scene.gt_classes)[best[idx]]
        l_sem = dk.mean(dk.cross_entropy(dk.take(result.semantic_logits, idx), classes))
    else:
        l_box = Tensor(0.0)
        l_sem = Tensor(0.0)
    subj_cls = result.parsed.subject.class_id
    if subj_cls < result.description_logits.shape[-1]:
        l_cls = dk.mean(dk.cross_entropy(result.description_logits, [subj_cls]))
    else:
        l_cls = Tensor(0.0)
    l_rf = loss_reference(result, scene, target)
    l_col = loss_color(result, scene, pos, best)
    total = dk.add(dk.add(dk.add(dk.mul(l_obj, w.objectness), dk.mul(l_box, w.box)),
                          dk.add(dk.mul(l_sem, w.semantic), dk.mul(l_cls, w.description))),
                   dk.add(dk.mul(l_rf, w.reference), dk.mul(l_col, w.color)))
    return LossBreakdown(l_obj, l_box, l_sem, l_cls, l_rf, total, l_col)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    decay_epochs: tuple[int, ...] = (5, 15, 25)
    decay_factor: float = 0.1
    proposal_mode: str = "jitter"
    k_proposals: int = 256
    top_k: int = 20
    k_neighbors: int = 8
    nms_threshold: float = 0.25
    augment: bool = True
    flip_prob: float = 0.5
    max_angle_deg: float = 30.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    mirror_text: bool = True  # rewrite left/right, front/behind to follow flips
    permute_colors: bool = True  # synthetic palette only: rename colors, repaint points
    use_lang_graph: bool = True
    use_prop_graph: bool = True
    use_visual_graph: bool = True
    seed: int = 0

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise dk.ConfigurationError("lr, batch_size and epochs must be nonnegative/positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise dk.ConfigurationError("decay epochs must be strictly increasing")

    def model_config(self) -> ModelConfig:
        return ModelConfig(k_proposals=self.k_proposals, top_k=self.top_k,
                           k_neighbors=self.k_neighbors, nms_threshold=self.nms_threshold,
                           use_lang_graph=self.use_lang_graph, use_prop_graph=self.use_prop_graph,
                           use_visual_graph=self.use_visual_graph)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * self.decay_factor ** drops

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise dk.ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    losses: dict[str, float]
    acc25: float | None = None
    acc50: float | None = None

    def row(self) -> dict:
        r = {"epoch": self.epoch, "lr": self.lr, **self.losses}
        r["acc@0.25"] = "" if self.acc25 is None else self.acc25
        r["acc@0.5"] = "" if self.acc50 is None else self.acc50
        return r


def _sample_seed(seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, index])


class ParseCache:
    """Parsed descriptions keyed by text (mirrored variants are parsed once each)."""

    def __init__(self):
        self._data: dict[str, ParsedDescription] = {}

    def __call__(self, text: str) -> ParsedDescription:
        if text not in self._data:
            self._data[text] = parse(text)
        return self._data[text]


def train_step(store: ParamStore, sample: Sample, cfg: TrainConfig,
               rng_seq: np.random.SeedSequence, scale: float = 1.0,
               parser=parse) -> dict[str, float]:
    """Forward + backward for one (scene, description) pair; gradients accumulate."""
    aug_rng, prop_rng, color_rng = (np.random.default_rng(s) for s in rng_seq.spawn(3))
    scene, text = sample.scene, sample.description
    if cfg.augment and cfg.permute_colors:
        scene, text = permute_colors(scene, text, color_rng)
    if cfg.augment:
        aug = Augmentation.sample(aug_rng, cfg.flip_prob, cfg.max_angle_deg, cfg.scale_range)
        scene = augment_with(scene, aug)
        if cfg.mirror_text:
            text = mirror_description(text, aug.flip_x, aug.flip_y)
    props = generate_proposals(scene, cfg.proposal_mode, prop_rng, cfg.k_proposals)
    result = forward(store, scene, parser(text), props, cfg.model_config())
    losses = loss_components(result, scene, sample.target_index)
    value = float(losses.total.values)
    if not math.isfinite(value):
        raise DivergenceError("non-finite loss")
    dk.backward(dk.mul(losses.total, scale))
    return losses.as_floats()


def train(corpus: Corpus | list[Sample], config: TrainConfig | None = None,
          store: ParamStore | None = None, val: list[Sample] | None = None,
          checkpoint: str | Path | None = None, metrics_csv: str | Path | None = None,
          eval_every: int = 0, progress=None) -> tuple[ParamStore, list[EpochMetrics]]:
    cfg = config or TrainConfig()
    samples = corpus.split("train") if isinstance(corpus, Corpus) else list(corpus)
    if not samples:
        raise ValueError("training corpus is empty")
    store = store or ParamStore(cfg.seed)
    parser = ParseCache()
    order_rng = np.random.default_rng(cfg.seed)
    history: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = order_rng.permutation(len(samples))
        sums: dict[str, float] = {}
        for b0 in range(0, len(perm), cfg.batch_size):
            batch = perm[b0:b0 + cfg.batch_size]
            for i in batch:
                try:
                    vals = train_step(store, samples[i], cfg, _sample_seed(cfg.seed, epoch, int(i)),
                                      1.0 / len(batch), parser)
                except DivergenceError:
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}, "
                        f"sample {int(i)}") from None
                for k, v in vals.items():
                    sums[k] = sums.get(k, 0.0) + v
            if lr > 0:
                dk.adam_step(store, lr)
            else:
                store.zero_grad()
        losses = {k: v / len(samples) for k, v in sums.items()}
        m = EpochMetrics(epoch, lr, losses)
        if val and eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
            res = evaluate(store, val, cfg)
            m.acc25, m.acc50 = res["acc@0.25"], res["acc@0.5"]
        history.append(m)
        log.info("epoch %d lr %.2g loss %.4f acc@0.5 %s", epoch, lr, losses["total"], m.acc50)
        if progress:
            progress(m)
    if checkpoint:
        store.save(checkpoint)
        Path(str(checkpoint) + ".json").write_text(json.dumps(cfg.to_dict(), indent=1))
    if metrics_csv:
        write_metrics(history, metrics_csv)
    return store, history


def write_metrics(history: list[EpochMetrics], path) -> None:
    rows = [m.row() for m in history]
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------- evaluation

def eval_proposals(sample: Sample, cfg: TrainConfig, index: int):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 10_000_019, index]))
    return generate_proposals(sample.scene, cfg.proposal_mode, rng, cfg.k_proposals)


def evaluate(store: ParamStore | str | Path, samples: Corpus | list[Sample],
             config: TrainConfig | None = None, selector=None) -> dict:
    """Acc@0.25 / Acc@0.5 overall and on the unique / multiple subsets.

    ``selector(sample, result) -> Box3D`` overrides the model's choice (used for
    oracle and random baselines).
    """
    cfg = config or TrainConfig()
    if not isinstance(store, ParamStore):
        store = ParamStore.load(store)
    if isinstance(samples, Corpus):
        samples = samples.split("val") or samples.samples
    mcfg = cfg.model_config()
    hits = {"overall": [], "unique": [], "multiple": []}
    ious = []
    for i, s in enumerate(samples):
        props = eval_proposals(s, cfg, i)
        result = forward(store, s.scene, parse(s.description), props, mcfg)
        box = selector(s, result) if selector else result.target[1]
        v = iou(box, s.target_box)
        ious.append(v)
        hits["overall"].append(v)
        hits[s.subset].append(v)
    out = {"n": len(samples), "mean_iou": float(np.mean(ious)) if ious else 0.0}
    for name, vals in hits.items():
        vals = np.asarray(vals)
        pre = "" if name == "overall" else f"{name}/"
        out[f"{pre}acc@0.25"] = float(np.mean(vals > 0.25)) if len(vals) else float("nan")
        out[f"{pre}acc@0.5"] = float(np.mean(vals > 0.5)) if len(vals) else float("nan")
        out[f"{pre}n"] = int(len(vals))
    return out
