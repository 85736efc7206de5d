"""Hypergraph-based image retrieval."""

from .database import EmbeddingDB
from .evaluation import average_precision_at_k, evaluate_retrieval, hit_rate_at_k, search
from .hashing import CentroidHasher, bin_diversity, hash_assign, train_centroids
from .pruning import PrunedGraph, Record, embed_batch, make_record, prune_graph, variance_summary
from .rerank import RerankResult, adaptive_rerank
from .similarity import ps_search, vs_distance, vs_distance_arrays, vs_search

__all__ = [
    "EmbeddingDB", "average_precision_at_k", "evaluate_retrieval", "hit_rate_at_k", "search",
    "CentroidHasher", "bin_diversity", "hash_assign", "train_centroids",
    "PrunedGraph", "Record", "embed_batch", "make_record", "prune_graph", "variance_summary",
    "RerankResult", "adaptive_rerank",
    "ps_search", "vs_distance", "vs_distance_arrays", "vs_search",
]
