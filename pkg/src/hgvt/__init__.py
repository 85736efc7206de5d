"""Hypergraph vision transformer with dynamic soft-membership hypergraphs."""

from .config import GraphDims, ModelConfig, TrainConfig, preset
from .model import HgVT, count_flops, count_params, forward_classify

__all__ = ["GraphDims", "ModelConfig", "TrainConfig", "preset", "HgVT", "count_flops", "count_params",
           "forward_classify"]
__version__ = "0.1.0"
