"""Pooled (cosine) and volumetric (diagonal Mahalanobis) similarity search."""

from __future__ import annotations

import numpy as np

from .database import EmbeddingDB
from .pruning import VAR_FLOOR, Record

ORDERS = ("pointwise", "0", "1", "2", "full")


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x, dtype=np.float64), where=n > 0)


def _rank(keys: np.ndarray, ids: np.ndarray, k: int) -> list[int]:
    """Ascending by key, ties by id."""
    order = np.lexsort((ids, keys))
    return ids[order[:k]].tolist()


def ps_scores(query: np.ndarray, db: EmbeddingDB) -> np.ndarray:
    return _unit(db.centroids) @ _unit(np.asarray(query, dtype=np.float64))


def ps_search(query: np.ndarray, db: EmbeddingDB, k: int = 10) -> list[int]:
    """Ids by descending cosine similarity of pooled embeddings."""
    return _rank(-ps_scores(query, db), db.ids, k)


def vs_distance_arrays(
    q_centroid, q_var_mean, q_delta, c_centroid, c_var_mean, c_delta, order: str = "0",
) -> np.ndarray:
    """Volumetric distance, vectorised over leading axes of the candidate arrays.

    Per-dimension variance is the average of the two distributions,
    ``sigma_i^2 = sigma_bar^2 + delta_i``.  With ``rho = 1 / sigma_bar^2``:
    order 0 uses ``rho`` alone; orders 1 and 2 scale by truncated expansions of
    ``1 / (1 + rho * delta_i)``, order 1 clamped at zero; ``full`` is exact;
    ``pointwise`` treats the query as a point and uses the candidate's own
    inverse variances.
    """
    order = str(order)
    if order not in ORDERS:
        raise ValueError(f"unknown order {order!r}; choose from {ORDERS}")
    diff2 = (_unit(np.asarray(q_centroid, dtype=np.float64)) - _unit(np.asarray(c_centroid, dtype=np.float64))) ** 2
    c_var_mean = np.asarray(c_var_mean, dtype=np.float64)
    if np.any(c_var_mean <= 0) or q_var_mean <= 0:
        raise ValueError("mean variance must be positive")
    if order == "pointwise":
        inv = 1.0 / np.maximum(c_var_mean[..., None] + c_delta, VAR_FLOOR)
        return (diff2 * inv).sum(axis=-1)
    var_mean = 0.5 * (q_var_mean + c_var_mean)
    delta = 0.5 * (np.asarray(q_delta) + np.asarray(c_delta))
    rho = 1.0 / var_mean
    if order == "full":
        return (diff2 / np.maximum(var_mean[..., None] + delta, VAR_FLOOR)).sum(axis=-1)
    x = rho[..., None] * delta
    if order == "0":
        factor = np.ones_like(x)
    elif order == "1":
        factor = np.maximum(1.0 - x, 0.0)
    else:
        factor = 1.0 - x + x**2
    return rho * (diff2 * factor).sum(axis=-1)


def vs_distance(q: Record, c: Record, order: str = "0") -> float:
    return float(vs_distance_arrays(q.centroid, q.var_mean, q.delta, c.centroid, c.var_mean, c.delta, order))


def vs_search(query: Record, db: EmbeddingDB, k: int = 10, order: str = "0") -> list[int]:
    """Ids by ascending volumetric distance, ties by id."""
    d = vs_distance_arrays(query.centroid, query.var_mean, query.delta,
                           db.centroids, db.var_mean, db.delta, order)
    return _rank(d, db.ids, k)
