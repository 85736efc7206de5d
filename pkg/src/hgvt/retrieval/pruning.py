"""Root-expert graph pruning and the per-image retrieval record."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import GraphDims

VAR_FLOOR = 1e-12


@dataclass
class PrunedGraph:
    root: int  # virtual-hyperedge index (0-based among virtual hyperedges)
    root_confidence: float
    vnodes: list[int]  # selected virtual-vertex indices (0-based among virtual vertices)
    edge_ids: list[int]  # primary-hyperedge indices, ranked
    contributions: list[float]
    features: np.ndarray  # (len(edge_ids), d_f)


def _top(scores: np.ndarray, k: int) -> list[int]:
    return np.argsort(-scores, kind="stable")[:k].tolist()


def prune_graph(xe: np.ndarray, soft: np.ndarray, gate_probs: np.ndarray | None, dims: GraphDims,
                m: int = 3, n: int = 4) -> PrunedGraph:
    """Keep the hyperedges reachable from the most confident expert.

    The root is the argmax virtual hyperedge.  Its ``m`` strongest virtual
    vertices each contribute their ``n`` strongest primary hyperedges; a
    hyperedge reached through several vertices appears once, scored by
    ``sum_v A[v, root] * A[v, edge]`` over the vertices that reached it.
    Ties resolve to the lowest index throughout.
    """
    if gate_probs is None:
        raise ValueError("graph pruning needs an expert-pooling model")
    soft = np.asarray(soft, dtype=np.float64)
    xe = np.asarray(xe, dtype=np.float64)
    iv, pe = dims.n_image_vertices, dims.n_primary_edges
    probs = np.asarray(gate_probs, dtype=np.float64)
    root = int(np.argmax(probs))
    root_col = pe + root
    v_scores = soft[iv:, root_col]
    vnodes = _top(v_scores, m)
    contrib: dict[int, float] = {}
    for v in vnodes:
        row = soft[iv + v, :pe]
        for e in _top(row, n):
            contrib[e] = contrib.get(e, 0.0) + v_scores[v] * row[e]
    ids = sorted(contrib, key=lambda e: (-contrib[e], e))
    return PrunedGraph(root, float(probs[root]), vnodes, ids, [contrib[e] for e in ids], xe[ids])


@dataclass
class Record:
    """One database entry or query: pooled centroid, variance summary and pruned hyperedges."""

    id: int
    label: int
    centroid: np.ndarray  # (w,)
    var_mean: float
    delta: np.ndarray  # (w,) per-dim variance minus var_mean
    edges: np.ndarray  # (K, d_f), ranked by contribution
    contributions: np.ndarray  # (K,)

    @property
    def variances(self) -> np.ndarray:
        return np.maximum(self.var_mean + self.delta, VAR_FLOOR)


def variance_summary(features: np.ndarray, width: int) -> tuple[float, np.ndarray]:
    """Mean per-dimension variance of the pruned hyperedges, and per-dim deviations from it.

    When the centroid is wider than the hyperedges (image and expert halves
    concatenated), the leading extra dimensions take the mean variance.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    var = features.var(axis=0) if features.shape[0] > 1 else np.zeros(features.shape[1])
    raw = float(var.mean())
    pad = width - var.shape[0]
    if pad < 0:
        raise ValueError(f"centroid width {width} narrower than hyperedge width {var.shape[0]}")
    full = np.concatenate([np.full(pad, raw), var])
    # deviations are taken from the unfloored mean so a degenerate set gives delta == 0
    return max(raw, VAR_FLOOR), full - raw


def make_record(id: int, label: int, pooled: np.ndarray, graph: PrunedGraph) -> Record:
    pooled = np.asarray(pooled, dtype=np.float64)
    mean, delta = variance_summary(graph.features, pooled.shape[0])
    return Record(id, label, pooled, mean, delta, np.asarray(graph.features, dtype=np.float64),
                  np.asarray(graph.contributions, dtype=np.float64))


def embed_batch(model, images, ids, labels, m: int = 3, n: int = 4) -> list[Record]:
    """Run ``model`` in inference mode and build one retrieval record per image."""
    import torch

    from ..model import forward_classify

    out = forward_classify(model, images, "infer")
    soft = out.adjacencies[-1].soft if out.adjacencies else None
    if soft is None or out.gate_probs is None:
        raise ValueError("embedding needs an expert-pooling model with at least one block")
    recs = []
    with torch.no_grad():
        for b in range(images.shape[0]):
            g = prune_graph(out.state.xe[b].numpy(), soft[b].numpy(), out.gate_probs[b].numpy(),
                            model.cfg.dims, m, n)
            recs.append(make_record(int(ids[b]), int(labels[b]), out.pooled[b].numpy(), g))
    return recs
