"""Attention pathways, fuzzy modulation, the dual FFN and the assembled block."""

from __future__ import annotations

import contextlib
import math
from typing import Callable

import torch
from torch import Tensor, nn

from . import core
from .config import ModelConfig
from .hypergraph import Adjacency, FeatureState, form_soft_adjacency, harden, vertex_pair_mask


class RMSNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        return core.rms_norm(x, self.weight)


class Attention(nn.Module):
    """Projection weights of one attention pathway (bias-free, ``h`` heads of ``d/h``)."""

    def __init__(self, dim: int, heads: int, with_kv: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"feature width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False) if with_kv else None
        self.v = nn.Linear(dim, dim, bias=False) if with_kv else None
        self.o = nn.Linear(dim, dim, bias=False)


def _split(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * dk)


def _project(attn: Attention, xq: Tensor, xkv: Tensor, kv: Attention | None = None):
    kv = kv or attn
    h = attn.heads
    return _split(attn.q(xq), h), _split(kv.k(xkv), h), _split(kv.v(xkv), h)


def _logit_scale(attn: Attention, scale: bool, width: int) -> float:
    return 1.0 / math.sqrt(width // attn.heads) if scale else 1.0


def vertex_self_attention(xv: Tensor, mask: Tensor, attn: Attention, scale: bool = False) -> Tensor:
    """Multi-head self-attention among vertices under the additive pair mask ``mask``."""
    q, k, v = _project(attn, xv, xv)
    logits = core.matmul(q, core.transpose(k)) * _logit_scale(attn, scale, xv.shape[-1])
    w = core.masked_softmax(logits, mask.unsqueeze(-3))
    return attn.o(_merge(core.matmul(w, v)))


def sparse_vertex_self_attention(xv: Tensor, hard: Tensor, attn: Attention, scale: bool = False) -> Tensor:
    """Gather-based equivalent of :func:`vertex_self_attention`.

    Each vertex gathers only the keys/values of vertices it shares a hyperedge
    with (plus itself) into a padded neighbour list, so the softmax never sees
    non-neighbours.
    """
    if xv.dim() == 3:
        return torch.stack([sparse_vertex_self_attention(x, a, attn, scale) for x, a in zip(xv, hard)])
    n = xv.shape[0]
    allowed = (hard @ hard.T > 0) | torch.eye(n, dtype=torch.bool)
    degree = allowed.sum(dim=1)
    width = int(degree.max())
    # neighbours first (stable), padding after
    order = torch.argsort((~allowed).to(torch.int8), dim=1, stable=True)[:, :width]
    valid = torch.arange(width).unsqueeze(0) < degree.unsqueeze(1)
    q, k, v = _project(attn, xv, xv)  # (h, n, dk)
    k_g, v_g = k[:, order], v[:, order]  # (h, n, width, dk)
    logits = torch.einsum("hnd,hnwd->hnw", q, k_g) * _logit_scale(attn, scale, xv.shape[-1])
    logits = logits.masked_fill(~valid, core.MASK_VALUE)
    w = torch.softmax(logits, dim=-1)
    return attn.o(_merge(torch.einsum("hnw,hnwd->hnd", w, v_g)))


def hadamard_correction(s: Tensor, shifted: Tensor) -> Tensor:
    """Gradient-free factor ``clamp(sign(s) + sign(shifted) + 1, -1, 1)``."""
    return core.clamp(core.stop_sign(s) + core.stop_sign(shifted) + 1.0, -1.0, 1.0)


def modified_hadamard(s: Tensor, soft: Tensor) -> Tensor:
    """Sign-preserving modulation of logits ``s`` by the shifted adjacency ``2A - 1``.

    Non-member logits (``A < 0.5``) always come out non-positive; member
    logits keep their sign.
    """
    core._broadcastable("modified_hadamard", s, soft)
    shifted = 2.0 * soft - 1.0
    return hadamard_correction(s, shifted) * (s * shifted)


def _modulate(s: Tensor, soft: Tensor, modulation: str) -> Tensor:
    if modulation == "standard":
        return core.mul(s, soft)
    if modulation == "modified":
        return modified_hadamard(s, soft)
    raise ValueError(f"unknown modulation {modulation!r}")


def _cross_attention(
    xq: Tensor,
    xkv: Tensor,
    soft: Tensor,
    allowed: Tensor,
    attn: Attention,
    modulation: str,
    kv: Attention | None,
    scale: bool,
    sparse: bool,
) -> Tensor:
    # soft/allowed are oriented (queries x keys)
    if soft.shape[-2:] != (xq.shape[-2], xkv.shape[-2]):
        raise core.ShapeError("cross_attention", [xq.shape, xkv.shape, soft.shape])
    q, k, v = _project(attn, xq, xkv, kv)
    s = core.matmul(q, core.transpose(k)) * _logit_scale(attn, scale, xq.shape[-1])
    logits = _modulate(s, soft.unsqueeze(-3), modulation)
    keep = allowed.to(torch.bool)
    if sparse:
        keep = keep & (soft.detach() > 0.5)
    mask = torch.where(keep, torch.zeros((), dtype=s.dtype), torch.full((), core.MASK_VALUE, dtype=s.dtype))
    w = core.masked_softmax(logits, mask.unsqueeze(-3))
    out = core.matmul(w, v)
    if sparse:
        # rows without any member receive nothing
        out = out * keep.any(dim=-1, keepdim=True).unsqueeze(-3).to(out.dtype)
    return attn.o(_merge(out))


def edge_aggregate_attention(
    xv: Tensor,
    xe: Tensor,
    soft: Tensor,
    allowed: Tensor,
    attn: Attention,
    modulation: str = "modified",
    *,
    kv: Attention | None = None,
    scale: bool = False,
    sparse: bool = False,
) -> Tensor:
    """Vertex -> hyperedge update: hyperedges query vertices, logits modulated by ``A^T``."""
    return _cross_attention(
        xe, xv, soft.transpose(-1, -2), allowed.transpose(-1, -2), attn, modulation, kv, scale, sparse
    )


def edge_distribute_attention(
    xe: Tensor,
    xv: Tensor,
    soft: Tensor,
    allowed: Tensor,
    attn: Attention,
    modulation: str = "modified",
    *,
    scale: bool = False,
    sparse: bool = False,
) -> Tensor:
    """Hyperedge -> vertex update: vertices query hyperedges, logits modulated by ``A``."""
    return _cross_attention(xv, xe, soft, allowed, attn, modulation, None, scale, sparse)


class DualFFN(nn.Module):
    """GeGLU layer over ``[x_adj || x]`` with separate feature and adjacency heads."""

    def __init__(self, d_f: int, d_a: int, hidden: int, bias: bool = True, adj_head: bool = True):
        super().__init__()
        self.d_f, self.d_a = d_f, d_a
        self.inp = nn.Linear(d_a + d_f, 2 * hidden, bias=bias)
        self.out_f = nn.Linear(hidden, d_f, bias=bias)
        self.out_a = nn.Linear(hidden, d_a, bias=bias) if adj_head else None

    def forward(self, x: Tensor, x_adj: Tensor) -> tuple[Tensor, Tensor | None]:
        return dual_ffn(x, x_adj, self)


def dual_ffn(x: Tensor, x_adj: Tensor, ffn: DualFFN) -> tuple[Tensor, Tensor | None]:
    if x.shape[-1] != ffn.d_f or x_adj.shape[-1] != ffn.d_a or x.shape[:-1] != x_adj.shape[:-1]:
        raise core.ShapeError("dual_ffn", [x.shape, x_adj.shape])
    gate, value = ffn.inp(core.concat([x_adj, x])).chunk(2, dim=-1)
    hidden = core.geglu(gate, value)
    return ffn.out_f(hidden), (ffn.out_a(hidden) if ffn.out_a is not None else None)


def drop_path(x: Tensor, rate: float, training: bool, generator: torch.Generator | None) -> Tensor:
    """Per-sample residual-branch drop with survival rescaling."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.dim() - 1) if x.dim() == 3 else (1,) * x.dim()
    mask = (torch.rand(shape, generator=generator, dtype=x.dtype) < keep).to(x.dtype)
    return x * mask / keep


class HgVTBlock(nn.Module):
    NORMS = ("v_adj", "e_adj", "self_v", "agg_v", "agg_e", "dist_v", "dist_e",
             "ffn_v", "ffn_vadj", "ffn_e", "ffn_eadj")

    def __init__(self, cfg: ModelConfig, drop_rate: float = 0.0):
        super().__init__()
        d_f, d_a = cfg.d_f, cfg.d_a
        self.alpha = cfg.alpha
        self.modulation = cfg.modulation
        self.scale = cfg.scale_attention
        self.tied_attention = cfg.tied_attention
        self.tied_adjacency = cfg.tied_adjacency
        self.drop_rate = drop_rate
        self.norms = nn.ModuleDict({
            name: RMSNorm(d_a if name in ("v_adj", "e_adj", "ffn_vadj", "ffn_eadj") else d_f)
            for name in self.NORMS
        })
        self.self_attn = Attention(d_f, cfg.heads)
        self.agg_attn = Attention(d_f, cfg.heads, with_kv=not cfg.tied_attention)
        self.dist_attn = Attention(d_f, cfg.heads)
        adj_head = not cfg.tied_adjacency
        self.ffn_v = DualFFN(d_f, d_a, cfg.ffn_hidden, cfg.ffn_bias, adj_head)
        self.ffn_e = None if cfg.joint_ffn else DualFFN(d_f, d_a, cfg.ffn_hidden, cfg.ffn_bias, adj_head)
        if cfg.tied_adjacency:
            self.adj_proj_v = nn.Linear(d_f, d_a, bias=False)
            self.adj_proj_e = nn.Linear(d_f, d_a, bias=False)

    @property
    def edge_ffn(self) -> DualFFN:
        return self.ffn_v if self.ffn_e is None else self.ffn_e

    def forward(
        self,
        state: FeatureState,
        allowed: Tensor,
        *,
        generator: torch.Generator | None = None,
        sparse: bool = False,
        timer: Callable[[str], contextlib.AbstractContextManager] | None = None,
    ) -> tuple[FeatureState, Adjacency]:
        section = timer or (lambda name: contextlib.nullcontext())
        n = self.norms
        drop = lambda x: drop_path(x, self.drop_rate, self.training, generator)  # noqa: E731

        with section("cluster"):
            if self.tied_adjacency:
                xv_adj, xe_adj = self.adj_proj_v(state.xv), self.adj_proj_e(state.xe)
            else:
                xv_adj, xe_adj = state.xv_adj, state.xe_adj
            soft = form_soft_adjacency(n["v_adj"](xv_adj), n["e_adj"](xe_adj), self.alpha)
            hard = harden(soft)
            pair_mask = vertex_pair_mask(hard * allowed)

        with section("spatial"):
            if sparse:
                dv = sparse_vertex_self_attention(n["self_v"](state.xv), hard * allowed, self.self_attn, self.scale)
            else:
                dv = vertex_self_attention(n["self_v"](state.xv), pair_mask, self.self_attn, self.scale)
            xv = state.xv + drop(dv)

        with section("aggregate"):
            kv = self.self_attn if self.tied_attention else None
            de = edge_aggregate_attention(
                n["agg_v"](xv), n["agg_e"](state.xe), soft, allowed, self.agg_attn, self.modulation,
                kv=kv, scale=self.scale, sparse=sparse,
            )
            xe = state.xe + drop(de)

        with section("distribute"):
            dv = edge_distribute_attention(
                n["dist_e"](xe), n["dist_v"](xv), soft, allowed, self.dist_attn, self.modulation,
                scale=self.scale, sparse=sparse,
            )
            xv = xv + drop(dv)

        with section("ffn"):
            dx, dx_adj = self.ffn_v(n["ffn_v"](xv), n["ffn_vadj"](xv_adj))
            xv = xv + drop(dx)
            if dx_adj is not None:
                xv_adj = xv_adj + drop(dx_adj)
            dx, dx_adj = self.edge_ffn(n["ffn_e"](xe), n["ffn_eadj"](xe_adj))
            xe = xe + drop(dx)
            if dx_adj is not None:
                xe_adj = xe_adj + drop(dx_adj)

        return FeatureState(xv, xe, xv_adj, xe_adj), Adjacency(soft, hard, self.alpha)
