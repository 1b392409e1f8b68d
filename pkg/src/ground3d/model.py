"""End-to-end forward pass: language graph, proposal graph, visual graph, matching."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffkernel as dk
from .descparser import ParsedDescription, color_words
from .diffkernel import ParamStore, Tensor
from .groundgraph import (TOP_K, MatchTable, Selection, VisualGraph, box_offset, build_visual_graph,
                          match_score_1, match_score_2, propagate_visual, prune_and_refine,
                          select_target)
from .langgraph import LanguageSceneGraph, build_language_graph
from .propgraph import K_NEIGHBORS, ProposalGraph, build_graph, fuse_visual, propagate
from .scenegeo import (K_PROPOSALS, NMS_THRESHOLD, NUM_CLASSES, Box3D, Proposals, Scene,
                       appearance_feature)


@dataclass
class ModelConfig:
    k_proposals: int = K_PROPOSALS
    top_k: int = TOP_K
    k_neighbors: int = K_NEIGHBORS
    nms_threshold: float = NMS_THRESHOLD
    num_classes: int = NUM_CLASSES
    use_lang_graph: bool = True
    use_prop_graph: bool = True
    use_visual_graph: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    parsed: ParsedDescription
    lang: LanguageSceneGraph
    proposals: Proposals
    prop_graph: ProposalGraph | None
    proposal_features: Tensor  # (K, D4) context-aware proposal features
    phi1_logits: Tensor  # (I, K)
    offsets: Tensor  # (I, K, 6)
    selections: list[Selection]
    visual: VisualGraph
    phi2_logits: Tensor | None  # per visual node
    table: MatchTable
    objectness_logits: Tensor  # (K,)
    box_deltas: Tensor  # (K, 6)
    semantic_logits: Tensor  # (K, C)
    description_logits: Tensor  # (C,)
    target: tuple[int, Box3D, float]
    color_logits: Tensor | None = None  # (K, n_colors) proposal color
    phrase_color_logits: Tensor | None = None  # (I, n_colors) color named by each phrase

    @property
    def phi1(self) -> np.ndarray:
        return self.table.phi1


def forward(store: ParamStore, scene: Scene, parsed: ParsedDescription, proposals: Proposals,
            config: ModelConfig | None = None, phi1_override: np.ndarray | None = None) -> ForwardResult:
    cfg = config or ModelConfig()
    lang = build_language_graph(store, parsed, refine=cfg.use_lang_graph)
    x_lang = lang.refined_nodes

    x_a = appearance_feature(store, proposals.stats)
    x_pv = fuse_visual(store, x_a, proposals.spatial)
    graph = None
    if cfg.use_prop_graph:
        graph = build_graph(store, x_pv, x_a, proposals.centers, cfg.k_neighbors)
        x_o = propagate(store, graph)[:len(proposals)]
    else:
        x_o = x_pv

    phi1_logits = match_score_1(store, x_lang, x_o)
    offsets = box_offset(store, x_lang, x_o)
    phi1 = dk._sigmoid(phi1_logits.values) if phi1_override is None else np.asarray(phi1_override)

    selections = prune_and_refine(phi1, offsets.values, proposals.centers, proposals.sizes,
                                  scene.bounds, cfg.top_k, cfg.nms_threshold)
    visual = build_visual_graph(store, selections, scene, lang.description)
    if cfg.use_visual_graph:
        propagate_visual(store, visual)
        phi2_logits = match_score_2(store, x_lang, visual)
        phi2 = dk._sigmoid(phi2_logits.values)
    else:
        visual.refined_nodes = visual.node_features
        phi2_logits = None
        phi2 = np.ones(len(visual.node_phrase))
    table = MatchTable.build(phi1, offsets.values, visual, phi2)

    obj = dk.reshape(dk.dense(store, x_o, "head/objectness", 1), (-1,))
    box = dk.mlp(store, x_o, "head/box", 128, 6, zero_last=True)
    sem = dk.dense(store, x_o, "head/semantic", cfg.num_classes)
    desc = dk.dense(store, lang.description, "head/description", cfg.num_classes)
    n_colors = len(color_words())
    col = dk.dense(store, x_o, "head/color", n_colors)
    phrase_col = dk.dense(store, x_lang, "head/phrase_color", n_colors)
    target = select_target(table, parsed.subject.phrase_index)
    return ForwardResult(parsed, lang, proposals, graph, x_o, phi1_logits, offsets, selections,
                         visual, phi2_logits, table, obj, box, sem, desc, target, col, phrase_col)


def grounding_json(scene: Scene, text: str, result: ForwardResult) -> dict:
    pid, box, score = result.target
    subject = result.parsed.subject
    return {
        "scene_id": scene.scene_id,
        "description": text,
        "subject_phrase": subject.text,
        "selected_proposal": pid,
        "selected_box": box.to_dict(),
        "fused_score": score,
        "per_phrase_topk": [
            {"phrase": p.text, "phrase_index": p.phrase_index,
             "candidates": result.table.per_phrase(p.phrase_index)}
            for p in result.parsed.noun_phrases],
    }
