"""Bin-restricted reranking of a shortlist by hyperedge agreement."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .database import EmbeddingDB
from .hashing import CentroidHasher
from .pruning import Record


@dataclass
class RerankResult:
    ids: list[int]
    scores: list[float]
    lookups: int  # query-edge lookups (at most R * C)
    comparisons: int  # hyperedge cosine evaluations


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def adaptive_rerank(query: Record, shortlist: list[int], db: EmbeddingDB, hasher: CentroidHasher,
                    c: int = 4) -> RerankResult:
    """Score each candidate by the mean best same-bin cosine of the query's top ``c`` hyperedges.

    A query hyperedge whose bin holds none of the candidate's hyperedges scores 0.
    Candidates are ordered by score, then by shortlist position.
    """
    n_q = query.edges.shape[0]
    if c > n_q:
        warnings.warn(f"C={c} exceeds the query's {n_q} hyperedges; using {n_q}", stacklevel=2)
        c = n_q
    if c < 1:
        raise ValueError("query has no hyperedges")
    q_edges = _unit(query.edges[:c])
    q_bins = hasher.assign(query.edges[:c])
    db_bins = db.edge_bins(hasher)
    lookups = comparisons = 0
    scores = []
    for cid in shortlist:
        pos = db.position(cid)
        cand = _unit(db.records[pos].edges)
        bins = db_bins[pos]
        total = 0.0
        for qe, qb in zip(q_edges, q_bins):
            lookups += 1
            same = cand[bins == qb]
            comparisons += same.shape[0]
            if same.shape[0]:
                total += float((same @ qe).max())
        scores.append(total / c)
    order = sorted(range(len(shortlist)), key=lambda i: (-scores[i], i))
    return RerankResult([shortlist[i] for i in order], [scores[i] for i in order], lookups, comparisons)
