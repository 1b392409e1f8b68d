"""Description-guided pruning, the visual graph and fused target selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from .diffkernel import ParamStore, Tensor
from .langgraph import refine_edges, refine_nodes
from .propgraph import D4, fuse_visual
from .scenegeo import (NMS_THRESHOLD, Box3D, Scene, appearance_feature, box_point_stats,
                       clamp_boxes, covering_box, nms, spatial_features)

TOP_K = 20
HEAD_HIDDEN = 128


class GroundingError(RuntimeError):
    pass


def _pair_index(I: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (phrase, proposal) index pairs."""
    return np.repeat(np.arange(I), K), np.tile(np.arange(K), I)


def match_score_1(store: ParamStore, lang: Tensor, vis: Tensor) -> Tensor:
    """Pruning-stage logits, shape (I, K); the score is sigmoid of these."""
    I, K = lang.shape[0], vis.shape[0]
    out = dk.pair_mlp(store, lang, vis, *_pair_index(I, K), "H_pn", HEAD_HIDDEN, 1)
    return dk.reshape(out, (I, K))


def box_offset(store: ParamStore, lang: Tensor, vis: Tensor) -> Tensor:
    """(I, K, 6) offsets: center shift (3) and log-size change (3)."""
    I, K = lang.shape[0], vis.shape[0]
    out = dk.pair_mlp(store, lang, vis, *_pair_index(I, K), "H_reg", HEAD_HIDDEN, 6, zero_last=True)
    return dk.reshape(out, (I, K, 6))


def apply_offsets(centers, sizes, offsets):
    offsets = np.asarray(offsets)
    return centers + offsets[..., :3], sizes * np.exp(offsets[..., 3:6])


@dataclass
class Selection:
    phrase: int
    proposals: np.ndarray  # proposal ids, descending pruning score, after NMS
    centers: np.ndarray
    sizes: np.ndarray
    ranked: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # top-K before NMS


def prune_and_refine(phi1: np.ndarray, offsets: np.ndarray, centers: np.ndarray, sizes: np.ndarray,
                     bounds: tuple[np.ndarray, np.ndarray], top_k: int = TOP_K,
                     nms_threshold: float = NMS_THRESHOLD) -> list[Selection]:
    out = []
    K = phi1.shape[1]
    for i in range(phi1.shape[0]):
        order = np.lexsort((np.arange(K), -phi1[i]))[:min(top_k, K)]
        rc, rs = apply_offsets(centers[order], sizes[order], offsets[i, order])
        rc, rs = clamp_boxes(rc, rs, bounds[0], bounds[1])
        keep = nms(rc, rs, phi1[i, order], nms_threshold)
        out.append(Selection(i, order[keep], rc[keep], rs[keep], order))
    return out


@dataclass
class VisualGraph:
    node_phrase: np.ndarray  # (n,)
    node_proposal: np.ndarray  # (n,)
    centers: np.ndarray  # refined boxes (n, 3)
    sizes: np.ndarray
    node_features: Tensor  # (n, D4 + D1) [x_u; x_l]
    edges: np.ndarray  # (e, 2) node indices, same phrase only
    edge_features: Tensor  # (e, D4)
    refined_nodes: Tensor | None = None
    refined_edges: Tensor | None = None
    attention: np.ndarray = field(default_factory=lambda: np.zeros(0))
    attention_centers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def nodes_of(self, phrase: int) -> np.ndarray:
        return np.flatnonzero(self.node_phrase == phrase)


def region_features(store: ParamStore, scene: Scene, centers, sizes) -> Tensor:
    """Fused appearance and spatial feature of arbitrary boxes in a scene."""
    stats, _ = box_point_stats(scene.feature_points, centers, sizes)
    lo, hi = scene.bounds
    s_b, l_b = spatial_features(centers, sizes, lo, hi, scene.centroid)
    return fuse_visual(store, appearance_feature(store, stats),
                       np.concatenate([s_b, l_b], axis=1))


def build_visual_graph(store: ParamStore, selections: list[Selection], scene: Scene,
                       x_l: Tensor) -> VisualGraph:
    node_phrase = np.concatenate([np.full(len(s.proposals), s.phrase) for s in selections])
    node_proposal = np.concatenate([s.proposals for s in selections]).astype(np.int64)
    centers = np.concatenate([s.centers for s in selections]).reshape(-1, 3)
    sizes = np.concatenate([s.sizes for s in selections]).reshape(-1, 3)
    n = len(node_phrase)
    edges = []
    for p in np.unique(node_phrase):
        idx = np.flatnonzero(node_phrase == p)
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                edges.append((idx[a], idx[b]))
    edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
    # nodes and covering boxes share one feature pass
    if len(edges):
        ec, es = covering_box(centers[edges[:, 0]], sizes[edges[:, 0]],
                              centers[edges[:, 1]], sizes[edges[:, 1]])
        all_c, all_s = np.concatenate([centers, ec]), np.concatenate([sizes, es])
    else:
        all_c, all_s = centers, sizes
    feats = region_features(store, scene, all_c, all_s)
    x_u = feats[:n]
    e_feat = feats[n:] if len(edges) else Tensor(np.zeros((0, D4)))
    x_l_rows = dk.take(dk.reshape(x_l, (1, -1)), np.zeros(n, dtype=np.int64))
    node_feats = dk.concat([x_u, x_l_rows], axis=1)
    return VisualGraph(node_phrase, node_proposal, centers, sizes, node_feats, edges, e_feat)


def propagate_visual(store: ParamStore, graph: VisualGraph) -> Tensor:
    graph.refined_edges = refine_edges(store, graph.node_features, graph.edge_features,
                                       graph.edges, name="vis")
    graph.refined_nodes, graph.attention, graph.attention_centers, _ = refine_nodes(
        store, graph.node_features, graph.refined_edges, graph.edges, name="vis")
    return graph.refined_nodes


def match_score_2(store: ParamStore, lang: Tensor, graph: VisualGraph,
                  node_feats: Tensor | None = None) -> Tensor:
    """Node-matching logits, one per visual-graph node against its phrase."""
    x = graph.refined_nodes if node_feats is None else node_feats
    n = x.shape[0]
    out = dk.pair_mlp(store, lang, x, graph.node_phrase, np.arange(n), "H_pu", HEAD_HIDDEN, 1,
                      zero_last=True)
    return dk.reshape(out, (-1,))


@dataclass
class MatchTable:
    phi1: np.ndarray  # (I, K)
    offsets: np.ndarray  # (I, K, 6)
    node_phrase: np.ndarray
    node_proposal: np.ndarray
    centers: np.ndarray  # refined boxes per node
    sizes: np.ndarray
    phi2: np.ndarray  # per node
    fused: np.ndarray  # per node, phi1 * phi2

    @classmethod
    def build(cls, phi1, offsets, graph: VisualGraph, phi2) -> "MatchTable":
        p1 = phi1[graph.node_phrase, graph.node_proposal]
        return cls(phi1, offsets, graph.node_phrase, graph.node_proposal, graph.centers,
                   graph.sizes, np.asarray(phi2), p1 * np.asarray(phi2))

    def per_phrase(self, phrase: int) -> list[dict]:
        idx = np.flatnonzero(self.node_phrase == phrase)
        return [{"proposal": int(self.node_proposal[k]),
                 "box": {"center": self.centers[k].tolist(), "size": self.sizes[k].tolist()},
                 "phi1": float(self.phi1[phrase, self.node_proposal[k]]),
                 "phi2": float(self.phi2[k]), "fused": float(self.fused[k])} for k in idx]


def select_target(table: MatchTable, subject: int) -> tuple[int, Box3D, float]:
    """Highest fused score among the subject's nodes; ties go to the lower proposal id."""
    idx = np.flatnonzero(table.node_phrase == subject)
    if idx.size == 0:
        raise GroundingError("subject phrase has no surviving proposals")
    order = np.lexsort((table.node_proposal[idx], -table.fused[idx]))
    k = idx[order[0]]
    return int(table.node_proposal[k]), Box3D(table.centers[k], table.sizes[k]), float(table.fused[k])
