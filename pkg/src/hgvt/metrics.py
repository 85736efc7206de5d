"""Hypergraph quality metrics over primary hyperedges.

Inputs are numpy arrays: soft memberships ``A`` and hard memberships ``H`` of
shape ``(n_vertices, n_clusters)`` and vertex features ``X`` of shape
``(n_vertices, d)``, already restricted to the vertex subset and cluster
columns of interest (see :class:`ClusterView`).  A cluster with fewer than two
hard members is excluded from every metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GraphDims

DIST_SNAP = 1e-12


@dataclass
class ClusterView:
    soft: np.ndarray
    hard: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.soft = np.asarray(self.soft, dtype=np.float64)
        self.hard = np.asarray(self.hard, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.soft.shape != self.hard.shape or self.soft.shape[0] != self.x.shape[0]:
            raise ValueError(f"inconsistent shapes {self.soft.shape}, {self.hard.shape}, {self.x.shape}")
        if self.soft.shape[0] == 0:
            raise ValueError("empty vertex selection")

    @classmethod
    def from_graph(cls, soft, hard, xv, dims: GraphDims, scope: str = "iV") -> "ClusterView":
        """Select vertex rows (``"iV"`` image vertices or ``"allV"``) and the primary-hyperedge columns."""
        if scope not in ("iV", "allV"):
            raise ValueError(f"scope must be 'iV' or 'allV', got {scope!r}")
        rows = dims.n_image_vertices if scope == "iV" else dims.n_vertices
        cols = dims.n_primary_edges
        return cls(np.asarray(soft)[:rows, :cols], np.asarray(hard)[:rows, :cols], np.asarray(xv)[:rows])

    @property
    def members(self) -> np.ndarray:
        return self.hard > 0.5

    @property
    def included(self) -> np.ndarray:
        """Clusters with at least two members and a defined centroid."""
        _, defined = cluster_centroids(self)
        return (self.members.sum(axis=0) >= 2) & defined


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _unit(a) @ _unit(b).T


def cluster_centroids(view: ClusterView) -> tuple[np.ndarray, np.ndarray]:
    """Soft-weighted centroids and a mask of the columns whose weight sum is positive."""
    w = view.soft.sum(axis=0)
    defined = w > 0
    cent = np.zeros((view.soft.shape[1], view.x.shape[1]))
    cent[defined] = (view.soft[:, defined].T @ view.x) / w[defined, None]
    return cent, defined


def hyperedge_entropy(view: ClusterView) -> tuple[np.ndarray, float]:
    """Per-cluster entropy of the softmax over member-to-centroid cosines (NaN for excluded clusters)."""
    cent, _ = cluster_centroids(view)
    cos = cosine_matrix(view.x, cent)
    out = np.full(cent.shape[0], np.nan)
    for j in np.flatnonzero(view.included):
        c = cos[view.members[:, j], j]
        p = np.exp(c - c.max())
        p /= p.sum()
        out[j] = -np.sum(p * np.log(p))
    return out, _nanmean(out)


def intra_cluster_similarity(view: ClusterView) -> tuple[np.ndarray, float]:
    cent, _ = cluster_centroids(view)
    cos = cosine_matrix(view.x, cent)
    out = np.full(cent.shape[0], np.nan)
    for j in np.flatnonzero(view.included):
        out[j] = cos[view.members[:, j], j].mean()
    return out, _nanmean(out)


def inter_cluster_distance(view: ClusterView) -> float:
    """Mean cosine distance over ordered pairs of distinct included centroids (NaN with < 2)."""
    cent, _ = cluster_centroids(view)
    c = cent[view.included]
    n = c.shape[0]
    if n < 2:
        return float("nan")
    d = 1.0 - cosine_matrix(c, c)
    np.fill_diagonal(d, 0.0)
    return float(d.sum() / (n * (n - 1)))


def silhouette(view: ClusterView, literal_denominator: bool = False) -> tuple[np.ndarray, float]:
    """Soft-weighted silhouette per (vertex, cluster) membership.

    ``a`` is the weighted mean cosine distance to the other members of the
    cluster, ``b`` the smallest such mean over every other included cluster,
    each weighted by membership in the cluster being averaged.  Entries are NaN
    where undefined.  The global value averages defined entries, or, with
    ``literal_denominator``, divides their sum by ``n_vertices * n_clusters``.
    """
    dist = 1.0 - cosine_matrix(view.x, view.x)
    dist[np.abs(dist) < DIST_SNAP] = 0.0
    np.fill_diagonal(dist, 0.0)
    n, m = view.soft.shape
    inc = view.included
    # weighted mean distance from every vertex i to the members of cluster k, excluding i
    w = view.soft * view.members  # (n, m)
    num = dist @ w  # zero diagonal drops the self term
    den = w.sum(axis=0)[None, :] - w  # remove own weight
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_d = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    s = np.full((n, m), np.nan)
    for j in np.flatnonzero(inc):
        others = [k for k in np.flatnonzero(inc) if k != j]
        if not others:
            continue
        for i in np.flatnonzero(view.members[:, j]):
            a = mean_d[i, j]
            cand = mean_d[i, others]
            cand = cand[~np.isnan(cand)]
            if np.isnan(a) or cand.size == 0:
                continue
            b = cand.min()
            hi = max(a, b)
            s[i, j] = 0.0 if hi == 0 else (b - a) / hi
    defined = ~np.isnan(s)
    if not defined.any():
        return s, float("nan")
    total = float(s[defined].sum())
    return s, total / (n * m) if literal_denominator else total / int(defined.sum())


def sparsity(hard: np.ndarray, scope: str = "all", dims: GraphDims | None = None) -> float:
    """Fraction of zero entries in a hard membership matrix (optionally primary columns only)."""
    hard = np.asarray(hard)
    if scope == "primary_only":
        if dims is None:
            raise ValueError("primary_only scope needs graph dims")
        hard = hard[..., : dims.n_primary_edges]
    elif scope != "all":
        raise ValueError(f"unknown scope {scope!r}")
    return 1.0 - float((hard > 0.5).sum()) / hard.size


def _nanmean(v: np.ndarray) -> float:
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def graph_report(soft, hard, xv, dims: GraphDims, scope: str = "iV") -> dict[str, float]:
    """All scalar metrics for one hypergraph."""
    view = ClusterView.from_graph(soft, hard, xv, dims, scope)
    return {
        "HE": hyperedge_entropy(view)[1],
        "ICS": intra_cluster_similarity(view)[1],
        "ICD": inter_cluster_distance(view),
        "SIL": silhouette(view)[1],
        "sparsity": sparsity(hard, "all"),
        "sparsity_primary": sparsity(hard, "primary_only", dims),
    }


def mean_reports(reports: list[dict[str, float]]) -> dict[str, float]:
    """Average each metric over the reports where it is defined."""
    keys = reports[0].keys() if reports else []
    return {k: _nanmean(np.array([r[k] for r in reports], dtype=np.float64)) for k in keys}
