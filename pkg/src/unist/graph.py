"""Traffic network representation and task-adaptive relation composition.

A scenario's road network is a directed weighted graph over a node set
shared by every scenario. The spatial encoder does not trust the raw
adjacency: it softly selects from a small basis of candidate relations
(forward flow, reverse influence, self-relation), composes the selections
by matrix product, and degree-normalizes the result before propagating
static node features through a shared graph convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import Tensor


@dataclass
class TrafficGraph:
    """Directed weighted road graph with static per-node features.

    ``adjacency[i, j] > 0`` iff the edge (i, j) exists; the diagonal is
    empty unless a self-loop edge is given explicitly. ``static_features``
    holds capacity-like per-node attributes, one row per node.
    """

    num_nodes: int
    edges: list[tuple[int, int, float]]
    static_features: np.ndarray
    adjacency: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.num_nodes
        if n <= 0:
            raise DataError(f"graph needs at least one node, got {n}")
        feats = np.asarray(self.static_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise DataError(
                f"static features must have one row per node: got shape {feats.shape} for {n} nodes"
            )
        self.static_features = feats
        adj = np.zeros((n, n), dtype=np.float64)
        cleaned = []
        for src, dst, w in self.edges:
            src, dst, w = int(src), int(dst), float(w)
            if not (0 <= src < n and 0 <= dst < n):
                raise DataError(f"edge ({src}, {dst}) out of range for {n} nodes")
            if w <= 0:
                raise DataError(f"edge ({src}, {dst}) has non-positive weight {w}")
            if adj[src, dst] > 0:
                raise DataError(f"duplicate edge ({src}, {dst})")
            adj[src, dst] = w
            cleaned.append((src, dst, w))
        self.edges = cleaned
        self.adjacency = adj
        self._candidate_cache: dict[bool, CandidateRelations] = {}

    @property
    def static_dim(self) -> int:
        return self.static_features.shape[1]

    def candidates(self, binary: bool = False) -> "CandidateRelations":
        got = self._candidate_cache.get(binary)
        if got is None:
            got = CandidateRelations.from_graph(self, binary=binary)
            self._candidate_cache[binary] = got
        return got

    def without_edges(self, removed: Sequence[tuple[int, int]]) -> "TrafficGraph":
        """A copy of this graph with the given directed edges removed."""
        gone = {(int(s), int(d)) for s, d in removed}
        kept = [(s, d, w) for s, d, w in self.edges if (s, d) not in gone]
        return TrafficGraph(self.num_nodes, kept, self.static_features.copy())

    def permuted(self, perm: Sequence[int]) -> "TrafficGraph":
        """Relabel nodes: node i becomes perm[i]."""
        perm = list(int(p) for p in perm)
        if sorted(perm) != list(range(self.num_nodes)):
            raise DataError(f"not a permutation of {self.num_nodes} nodes: {perm}")
        edges = [(perm[s], perm[d], w) for s, d, w in self.edges]
        feats = np.empty_like(self.static_features)
        for i, p in enumerate(perm):
            feats[p] = self.static_features[i]
        return TrafficGraph(self.num_nodes, edges, feats)


def row_normalize(matrix: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay all-zero.

    Disconnected nodes produce zero rows, which must surface as zeros,
    never NaN.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"row_normalize expects a matrix, got shape {m.shape}")
    if (m < 0).any():
        bad = np.argwhere(m < 0)[0]
        raise ValueError(f"row_normalize needs nonnegative entries; found {m[tuple(bad)]} at {tuple(bad)}")
    sums = m.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0, sums, 1.0)
    return np.where(sums > 0, m / safe, 0.0)


@dataclass
class CandidateRelations:
    """Ordered relation basis [forward, reverse, identity], identity last.

    Forward and reverse adjacencies are row-normalized so every member is
    row-stochastic or row-substochastic.
    """

    matrices: list[np.ndarray]

    @classmethod
    def from_graph(cls, graph: TrafficGraph, binary: bool = False) -> "CandidateRelations":
        adj = graph.adjacency
        if binary:
            adj = (adj > 0).astype(np.float64)
        fwd = row_normalize(adj)
        rev = row_normalize(adj.T)
        return cls([fwd, rev, np.eye(graph.num_nodes)])

    def __len__(self) -> int:
        return len(self.matrices)

    @property
    def num_nodes(self) -> int:
        return self.matrices[0].shape[0]

    def stacked(self) -> np.ndarray:
        """(|A|, N*N) layout used to take softmax-weighted combinations."""
        n = self.num_nodes
        return np.stack([m.reshape(n * n) for m in self.matrices], axis=0)


def select_relation(candidates: CandidateRelations, logits: Tensor) -> Tensor:
    """Softmax-weighted combination of the candidate relations.

    Returns sum_t softmax(logits)_t * A_t as an N x N tensor,
    differentiable with respect to the logits.
    """
    if logits.ndim != 1 or logits.shape[0] != len(candidates):
        raise ShapeError(
            f"need one logit per candidate: {logits.shape} vs {len(candidates)} candidates"
        )
    n = candidates.num_nodes
    weights = T.reshape(T.softmax(logits), (1, len(candidates)))
    flat = T.matmul(weights, Tensor(candidates.stacked()))
    return T.reshape(flat, (n, n))


def compose_relations(
    candidates: CandidateRelations, channel_logits: Sequence[Sequence[Sequence[Tensor]]]
) -> list[Tensor]:
    """Build one composed, normalized adjacency per channel.

    ``channel_logits[c][l]`` holds the two logit vectors of channel c at
    layer l. Layer 1 multiplies its two soft selections and normalizes;
    every later layer right-multiplies one newly selected relation onto
    the running composite and renormalizes, so row sums stay in {0, 1}.
    """
    if not channel_logits:
        raise ShapeError("compose_relations needs at least one channel")
    composed = []
    for per_layer in channel_logits:
        if not per_layer:
            raise ShapeError("compose_relations needs at least one layer per channel")
        q1 = select_relation(candidates, per_layer[0][0])
        q2 = select_relation(candidates, per_layer[0][1])
        running = T.normalize_rows(T.matmul(q1, q2))
        for layer in per_layer[1:]:
            q = select_relation(candidates, layer[0])
            running = T.normalize_rows(T.matmul(running, q))
        composed.append(running)
    return composed


def gcn_propagate(adjacency: Tensor, features: Tensor, weight: Tensor) -> Tensor:
    """Self-loop, degree-normalize, propagate, ReLU.

    Computes ReLU(D~^-1 (A + I) X' W) where D~ is the degree matrix of
    A + I. The weight is the single transform shared by every channel.
    """
    n = adjacency.shape[0]
    if adjacency.ndim != 2 or adjacency.shape[1] != n:
        raise ShapeError(f"adjacency must be square, got {adjacency.shape}")
    if features.shape[0] != n:
        raise ShapeError(f"features rows ({features.shape}) must match {n} nodes")
    if weight.shape[0] != features.shape[1]:
        raise ShapeError(f"weight {weight.shape} incompatible with features {features.shape}")
    with_loops = T.add(adjacency, Tensor(np.eye(n)))
    propagated = T.matmul(T.normalize_rows(with_loops), features)
    return T.relu(T.matmul(propagated, weight))
