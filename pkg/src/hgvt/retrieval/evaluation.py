"""mAP@k and external-reference hit rate for the retrieval methods."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .database import EmbeddingDB
from .hashing import CentroidHasher
from .pruning import Record
from .rerank import adaptive_rerank
from .similarity import ps_search, vs_search

METHODS = ("ps", "vs", "aps", "avs")


def average_precision_at_k(relevant: Iterable[bool], k: int = 10) -> float:
    """Mean of precision@i over the hit positions i <= k (0 when there is no hit)."""
    hits, total = 0, 0.0
    for i, rel in enumerate(list(relevant)[:k], start=1):
        if rel:
            hits += 1
            total += hits / i
    return total / hits if hits else 0.0


def hit_rate_at_k(rankings: dict[int, list[int]], reference: dict[int, int], k: int = 10) -> float:
    """Fraction of referenced queries whose designated top-1 id appears in the top ``k``."""
    keys = [q for q in rankings if q in reference]
    if not keys:
        return float("nan")
    return float(np.mean([reference[q] in rankings[q][:k] for q in keys]))


def load_reference(path: str | Path) -> dict[int, int]:
    raw = json.loads(Path(path).read_text())
    return {int(k): int(v) for k, v in raw.items()}


def search(method: str, query: Record, db: EmbeddingDB, k: int = 10, *, order: str = "0",
           hasher: CentroidHasher | None = None, r: int = 100, c: int = 4,
           exclude: int | None = None) -> list[int]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    depth = (r if method in ("aps", "avs") else k) + (1 if exclude is not None else 0)
    if method in ("ps", "aps"):
        ids = ps_search(query.centroid, db, depth)
    else:
        ids = vs_search(query, db, depth, order)
    if exclude is not None:
        ids = [i for i in ids if i != exclude]
    if method in ("aps", "avs"):
        if hasher is None:
            raise ValueError(f"{method} needs a centroid hasher")
        ids = adaptive_rerank(query, ids[:r], db, hasher, c).ids
    return ids[:k]


def evaluate_retrieval(
    db: EmbeddingDB,
    queries: list[Record],
    methods: Iterable[str] = ("ps", "vs"),
    k: int = 10,
    *,
    order: str = "0",
    hasher: CentroidHasher | None = None,
    r: int = 100,
    c: int = 4,
    reference: dict[int, int] | None = None,
    exclude_self: bool = True,
) -> dict[str, dict[str, float]]:
    """Per method: ``mAP@k`` (relevance = same label) and, with ``reference``, ``hit_rate@k``."""
    out = {}
    for method in methods:
        aps, rankings = [], {}
        for q in queries:
            ex = q.id if exclude_self and q.id in db else None
            ids = search(method, q, db, k, order=order, hasher=hasher, r=r, c=c, exclude=ex)
            rankings[q.id] = ids
            aps.append(average_precision_at_k([db.get(i).label == q.label for i in ids], k))
        res = {f"mAP@{k}": float(np.mean(aps)) if aps else float("nan")}
        if reference is not None:
            res[f"hit_rate@{k}"] = hit_rate_at_k(rankings, reference, k)
        out[method] = res
    return out
