"""Bipartite hypergraph state, dynamic adjacency and the structural regularisers.

All functions accept optional leading batch axes; the last two axes are the
vertex/hyperedge axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from . import core
from .config import GraphDims

__all__ = [
    "GraphDims",
    "FeatureState",
    "Adjacency",
    "form_soft_adjacency",
    "harden",
    "vertex_pair_mask",
    "hierarchy_mask",
    "population_density",
    "population_loss",
    "diversity_loss",
    "pairwise_diversity",
]


@dataclass
class FeatureState:
    """The four interleaved feature matrices of one hypergraph (or a batch of them)."""

    xv: Tensor  # (..., |V|, d_f)
    xe: Tensor  # (..., |E|, d_f)
    xv_adj: Tensor  # (..., |V|, d_a)
    xe_adj: Tensor  # (..., |E|, d_a)

    def check(self, dims: GraphDims) -> None:
        if self.xv.shape[-2] != dims.n_vertices or self.xv_adj.shape[-2] != dims.n_vertices:
            raise core.ShapeError("FeatureState", [self.xv.shape, self.xv_adj.shape], "vertex rows")
        if self.xe.shape[-2] != dims.n_edges or self.xe_adj.shape[-2] != dims.n_edges:
            raise core.ShapeError("FeatureState", [self.xe.shape, self.xe_adj.shape], "edge rows")

    def detach(self) -> "FeatureState":
        return FeatureState(self.xv.detach(), self.xe.detach(), self.xv_adj.detach(), self.xe_adj.detach())

    def select(self, index: int) -> "FeatureState":
        return FeatureState(self.xv[index], self.xe[index], self.xv_adj[index], self.xe_adj[index])


@dataclass
class Adjacency:
    soft: Tensor
    hard: Tensor
    alpha: float = 4.0


def form_soft_adjacency(xv_adj: Tensor, xe_adj: Tensor, alpha: float = 4.0, eps: float = core.NORM_EPS) -> Tensor:
    """Sharpened-sigmoid cosine membership ``sigma(alpha * cos(xv_adj_i, xe_adj_j))``."""
    if xv_adj.shape[-1] != xe_adj.shape[-1]:
        raise core.ShapeError("form_soft_adjacency", [xv_adj.shape, xe_adj.shape])
    cos = core.matmul(core.l2_normalize(xv_adj, eps), core.transpose(core.l2_normalize(xe_adj, eps)))
    return core.sigmoid(alpha * cos)


def harden(soft: Tensor) -> Tensor:
    """Binary membership ``[A > 0.5]`` (strict), in the dtype of ``soft``."""
    return (soft.detach() > 0.5).to(soft.dtype)


def vertex_pair_mask(hard: Tensor) -> Tensor:
    """Additive self-attention mask allowing vertex pairs that share a hyperedge.

    The diagonal is always allowed so vertices in no hyperedge keep a
    well-defined softmax row.
    """
    co = core.matmul(hard, core.transpose(hard)) > 0
    eye = torch.eye(hard.shape[-2], dtype=torch.bool, device=hard.device)
    allowed = co | eye
    zero = torch.zeros((), dtype=hard.dtype)
    return torch.where(allowed, zero, torch.full((), core.MASK_VALUE, dtype=hard.dtype))


def hierarchy_mask(dims: GraphDims, dtype=torch.float64) -> Tensor:
    """``|V| x |E|`` mask: 0 for (image vertex, virtual hyperedge) pairs, 1 elsewhere."""
    allowed = torch.ones(dims.n_vertices, dims.n_edges, dtype=dtype)
    allowed[: dims.n_image_vertices, dims.n_primary_edges :] = 0
    return allowed


def population_density(soft: Tensor) -> Tensor:
    """Soft vertex count per hyperedge, ``P_j = 2 * sum_i max(A_ij - 0.5, 0)``."""
    return 2.0 * torch.relu(soft - 0.5).sum(dim=-2)


def population_loss(soft: Tensor, beta: float, gamma: float, columns: slice | None = None) -> Tensor:
    """Hinge penalty keeping each hyperedge density inside ``[gamma, beta]``.

    Summed over hyperedge columns (optionally restricted with ``columns``) and
    averaged over any leading batch axes.
    """
    if not beta > gamma >= 0:
        raise ValueError(f"population bounds need beta > gamma >= 0, got beta={beta}, gamma={gamma}")
    if columns is not None:
        soft = soft[..., columns]
    p = population_density(soft)
    per_graph = (torch.relu(p - beta) + torch.relu(gamma - p)).sum(dim=-1)
    return per_graph.mean() if per_graph.dim() else per_graph


def pairwise_diversity(x: Tensor, eps: float = core.NORM_EPS) -> Tensor:
    """Half the summed off-diagonal absolute cosine similarity between rows."""
    if x.shape[-2] < 1:
        raise core.ShapeError("diversity", [x.shape], "needs at least one row")
    xn = core.l2_normalize(x, eps)
    gram = core.absolute(core.matmul(xn, core.transpose(xn)))
    off = 1.0 - torch.eye(x.shape[-2], dtype=x.dtype)
    return 0.5 * (gram * off).sum(dim=(-2, -1))


def diversity_loss(state: FeatureState, dims: GraphDims, eps: float = core.NORM_EPS) -> Tensor:
    """Diversity penalty over virtual vertices, their adjacency features, all hyperedges
    and the hyperedge adjacency features; averaged over leading batch axes."""
    iv = dims.n_image_vertices
    targets = [state.xv[..., iv:, :], state.xv_adj[..., iv:, :], state.xe, state.xe_adj]
    total = sum(pairwise_diversity(t, eps) for t in targets)
    return total.mean() if total.dim() else total
