"""Proposal relation graph over K_o proposals plus one global scene node."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import ParamStore, Tensor
from .scenegeo import SPATIAL_DIM

D2 = 256
D4 = 128
SPATIAL_HIDDEN = 64
K_NEIGHBORS = 8


def fuse_visual(store: ParamStore, appearance: Tensor, spatial, name: str = "fuse") -> Tensor:
    """x_pv = F_vf([x_a; F_p([S_b; L_b])]), row-wise."""
    spatial = spatial if isinstance(spatial, Tensor) else Tensor(np.atleast_2d(spatial))
    geo = dk.mlp(store, spatial, f"{name}/F_p", SPATIAL_HIDDEN, SPATIAL_HIDDEN)
    return dk.mlp(store, dk.concat([appearance, geo], axis=1), f"{name}/F_vf", D4, D4)


@dataclass
class ProposalGraph:
    features: Tensor  # (K+1, D4) fused features, scene node last
    centers: np.ndarray  # neighbor-entry center node
    neighbors: np.ndarray  # neighbor-entry neighbor node
    augmented: Tensor | None = None
    attention: np.ndarray | None = None

    @property
    def num_proposals(self) -> int:
        return self.features.shape[0] - 1


def knn(centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other boxes by center distance, ties by index."""
    d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


def build_graph(store: ParamStore, x_pv: Tensor, appearance: Tensor, box_centers: np.ndarray,
                k: int = K_NEIGHBORS) -> ProposalGraph:
    """Attach the scene node and kNN neighborhoods.

    The scene node feature fuses the mean appearance (global scene feature) with
    zeroed spatial features. Every proposal neighbors its k nearest proposals and
    the scene node; the scene node neighbors every proposal.
    """
    n = x_pv.shape[0]
    k = max(0, min(k, n - 1))
    x_s = dk.mean(appearance, axis=0, keepdims=True)
    scene_feat = fuse_visual(store, x_s, np.zeros((1, SPATIAL_DIM)))
    feats = dk.concat([x_pv, scene_feat], axis=0)
    nb = knn(box_centers, k) if k else np.zeros((n, 0), dtype=np.int64)
    centers = np.concatenate([np.repeat(np.arange(n), k), np.arange(n), np.full(n, n)])
    neighbors = np.concatenate([nb.ravel(), np.full(n, n), np.arange(n)])
    return ProposalGraph(feats, centers.astype(np.int64), neighbors.astype(np.int64))


def global_scene_feature(appearance: Tensor) -> Tensor:
    return dk.mean(appearance, axis=0)


def propagate(store: ParamStore, graph: ProposalGraph, name: str = "propgraph") -> Tensor:
    """x^c_i = x_i + sum_j r_ij F_f(x_j) with r_ij a softmax over N(i) of a
    two-layer score on [x_i; x_j]."""
    x = graph.features
    n = x.shape[0]
    score = dk.reshape(dk.pair_mlp(store, x, x, graph.centers, graph.neighbors, f"{name}/att", 64, 1),
                       (-1,))
    r = dk.segment_softmax(score, graph.centers, n)
    msg = dk.take(dk.mlp(store, x, f"{name}/F_f", D4, D4), graph.neighbors)
    agg = dk.segment_sum(dk.mul(msg, dk.reshape(r, (-1, 1))), graph.centers, n)
    graph.augmented = dk.add(x, agg)
    graph.attention = r.values.copy()
    return graph.augmented
