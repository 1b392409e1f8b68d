"""Language scene graph: phrase/relation/description encoding and refinement."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from .descparser import (CONJUNCTIONS, DETERMINERS, FILLERS, PRONOUNS, VERBS, Lexicon,
                         ParsedDescription, default_lexicon)
from .diffkernel import ParamStore, Tensor

WORD_DIM = 64
RESERVE_ROWS = 64
D1 = 128
GRU_HIDDEN = 128


class Vocabulary:
    """Lemma -> embedding row. Unknown lemmas hash into reserve rows."""

    def __init__(self, words, reserve: int = RESERVE_ROWS):
        self.words = sorted(set(words))
        self.index = {w: i for i, w in enumerate(self.words)}
        self.reserve = reserve

    def __len__(self) -> int:
        return len(self.words) + self.reserve

    def row(self, lemma: str) -> int:
        i = self.index.get(lemma)
        if i is not None:
            return i
        return len(self.words) + zlib.crc32(lemma.encode()) % self.reserve

    @classmethod
    def from_lexicon(cls, lexicon: Lexicon | None = None) -> "Vocabulary":
        lexicon = lexicon or default_lexicon()
        words = set()
        for surface, (_, lemma) in lexicon.nouns.lookup.items():
            words.update((surface, lemma))
        words.update(lexicon.nouns.attributes)
        words.update(lexicon.relations.vocabulary)
        words.update(PRONOUNS | DETERMINERS | VERBS | CONJUNCTIONS | FILLERS)
        return cls(words)


_VOCAB: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _VOCAB
    if _VOCAB is None:
        _VOCAB = Vocabulary.from_lexicon()
    return _VOCAB


@dataclass
class LanguageSceneGraph:
    node_features: Tensor  # (I, D1) x_v
    edge_features: Tensor  # (E, D1) x_r
    edges: np.ndarray  # (E, 2) source, target phrase indices
    description: Tensor  # (D1,) x_l
    word_embeddings: Tensor  # (T, WORD_DIM) h_t
    refined_nodes: Tensor | None = None
    refined_edges: Tensor | None = None
    attention: np.ndarray = field(default_factory=lambda: np.zeros(0))
    attention_centers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    attention_neighbors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    phrase_text: list[str] = field(default_factory=list)
    subject: int = 0

    def to_dict(self) -> dict:
        return {
            "nodes": [{"index": i, "text": t, "subject": i == self.subject}
                      for i, t in enumerate(self.phrase_text)],
            "edges": [{"source": int(s), "target": int(t)} for s, t in self.edges],
            "attention": [{"node": int(c), "neighbor": int(n), "weight": float(w)}
                          for c, n, w in zip(self.attention_centers, self.attention_neighbors,
                                             self.attention)],
        }


def embed_words(store: ParamStore, lemmas: list[str], vocab: Vocabulary | None = None) -> Tensor:
    vocab = vocab or default_vocabulary()
    table = store.get("embed/table", (len(vocab), WORD_DIM), fan_in=1)
    return dk.take(table, [vocab.row(w) for w in lemmas])


def encode_sequences(store: ParamStore, seqs: list[list[str]], name: str,
                     vocab: Vocabulary | None = None) -> Tensor:
    """BiGRU-encode each lemma sequence, mean-pool and project to D1."""
    if any(len(s) == 0 for s in seqs):
        raise dk.DomainError(f"{name}: empty token span")
    embedded = [embed_words(store, s, vocab) for s in seqs]
    pooled = dk.birnn_encode_batch(store, embedded, f"{name}/gru", GRU_HIDDEN)
    return dk.dense(store, pooled, f"{name}/proj", D1)


def encode_phrase(store, phrase_tokens, vocab=None) -> Tensor:
    return encode_sequences(store, [phrase_tokens], "phrase", vocab)[0]


def encode_relation(store, predicate_tokens, vocab=None) -> Tensor:
    return encode_sequences(store, [predicate_tokens], "relation", vocab)[0]


def encode_description(store, lemmas, vocab=None) -> Tensor:
    return encode_sequences(store, [lemmas], "description", vocab)[0]


# ---------------------------------------------------------------- message passing
# The same two operators drive the language graph and the visual graph; only the
# parameter prefix and widths differ.

def refine_edges(store: ParamStore, nodes: Tensor, edge_feats: Tensor, edges: np.ndarray,
                 name: str = "lang") -> Tensor:
    """x^c_r = x_r + F_r([x_src; x_dst; x_r]) for every edge."""
    if len(edges) == 0:
        return edge_feats
    edges = np.asarray(edges)
    width = edge_feats.shape[1]
    upd = dk.gather_mlp(store, [(nodes, edges[:, 0]), (nodes, edges[:, 1]), (edge_feats, None)],
                        f"{name}/F_r", width, width)
    return dk.add(edge_feats, upd)


def neighborhoods(edges: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Undirected neighbor entries: (center, neighbor, edge id) per direction."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = np.arange(len(edges))
    centers = np.concatenate([edges[:, 0], edges[:, 1]])
    nbrs = np.concatenate([edges[:, 1], edges[:, 0]])
    return centers, nbrs, np.concatenate([e, e])


def refine_nodes(store: ParamStore, nodes: Tensor, refined_edges: Tensor, edges: np.ndarray,
                 name: str = "lang"):
    """x^c_i = x_i + sum_j w_ij F_v([x_j; x^c_r]), w = softmax_j(m_ij . m_ij).

    Returns (refined nodes, attention weights, centers, neighbors).
    """
    n = nodes.shape[0]
    if len(edges) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return nodes, np.zeros(0), empty, empty
    centers, nbrs, eid = neighborhoods(edges)
    width = nodes.shape[1]
    msg = dk.gather_mlp(store, [(nodes, nbrs), (refined_edges, eid)], f"{name}/F_v", width, width)
    w = dk.segment_softmax(dk.rowdot(msg, msg), centers, n)
    agg = dk.segment_sum(dk.mul(msg, dk.reshape(w, (-1, 1))), centers, n)
    return dk.add(nodes, agg), w.values.copy(), centers, nbrs


def build_language_graph(store: ParamStore, parsed: ParsedDescription, refine: bool = True,
                         vocab: Vocabulary | None = None) -> LanguageSceneGraph:
    lemmas = [t.lemma for t in parsed.tokens]
    phrase_seqs = [[t.lemma for t in p.tokens] for p in parsed.noun_phrases]
    x_v = encode_sequences(store, phrase_seqs, "phrase", vocab)
    edges = np.array([(r.source_phrase, r.target_phrase) for r in parsed.relation_phrases],
                     dtype=np.int64).reshape(-1, 2)
    if len(edges):
        x_r = encode_sequences(store, [[t.lemma for t in r.predicate_tokens]
                                       for r in parsed.relation_phrases], "relation", vocab)
    else:
        x_r = Tensor(np.zeros((0, D1)))
    x_l = encode_description(store, lemmas, vocab)
    graph = LanguageSceneGraph(x_v, x_r, edges, x_l, embed_words(store, lemmas, vocab),
                               phrase_text=[p.text for p in parsed.noun_phrases],
                               subject=parsed.subject.phrase_index)
    if refine:
        graph.refined_edges = refine_edges(store, x_v, x_r, edges)
        (graph.refined_nodes, graph.attention, graph.attention_centers,
         graph.attention_neighbors) = refine_nodes(store, x_v, graph.refined_edges, edges)
    else:
        graph.refined_edges, graph.refined_nodes = x_r, x_v
    return graph
