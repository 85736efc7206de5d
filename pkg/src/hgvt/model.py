"""Patch embedding, hypergraph initialisation, block stack, pooling heads and accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from . import core
from .attention import HgVTBlock
from .config import ModelConfig
from .hypergraph import Adjacency, FeatureState, hierarchy_mask


def sincos_position_embedding(side: int, dim: int) -> Tensor:
    """Fixed 2-D sine/cosine embedding, one row per grid cell in row-major order."""
    if dim % 4:
        raise ValueError("position embedding width must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys, xs = torch.meshgrid(torch.arange(side, dtype=torch.float64),
                            torch.arange(side, dtype=torch.float64), indexing="ij")
    out_y = ys.reshape(-1, 1) * omega
    out_x = xs.reshape(-1, 1) * omega
    return torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)


def stem_channels(cfg: ModelConfig) -> list[int]:
    """Output channels of the stride-2 conv stages (log2(patch) stages, doubling up to d_f)."""
    n = int(round(math.log2(cfg.patch_size)))
    if 2**n != cfg.patch_size:
        raise ValueError("conv stem needs a power-of-two patch size")
    return [max(cfg.d_f // 2 ** (n - 1 - i), 1) for i in range(n)]


class PatchEmbed(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.kind = cfg.stem
        self.patch = cfg.patch_size
        self.image_size = cfg.image_size
        if cfg.stem == "patch_projection":
            self.proj = nn.Linear(cfg.in_channels * cfg.patch_size**2, cfg.d_f)
        else:
            layers: list[nn.Module] = []
            c_in = cfg.in_channels
            for c_out in stem_channels(cfg):
                layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                           nn.BatchNorm2d(c_out), nn.GELU()]
                c_in = c_out
            layers.append(nn.Conv2d(c_in, cfg.d_f, 1))
            self.conv = nn.Sequential(*layers)
        self.register_buffer("pos", sincos_position_embedding(cfg.grid_side, cfg.d_f), persistent=False)

    def forward(self, images: Tensor) -> Tensor:
        if images.dim() != 4:
            raise core.ShapeError("patch_embed", [images.shape], "expected (B, C, H, W)")
        h, w = images.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ValueError(f"resolution {h}x{w} not divisible by patch size {self.patch}")
        if self.kind == "patch_projection":
            p = self.patch
            b, c = images.shape[:2]
            patches = images.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
            x = self.proj(patches.reshape(b, (h // p) * (w // p), c * p * p))
        else:
            x = self.conv(images).flatten(2).transpose(1, 2)
        return x + self.pos


@dataclass
class ForwardOutput:
    logits: Tensor
    adjacencies: list[Adjacency]
    layer_states: list[FeatureState]  # state entering each block
    state: FeatureState  # final state
    pooled: Tensor  # embedding used for retrieval
    gate_probs: Tensor | None = None
    gate_logits: Tensor | None = None
    extras: dict = field(default_factory=dict)


def expert_pool(
    xe_virtual: Tensor,
    gate: "ExpertGate",
    *,
    training: bool,
    top_k: int = 1,
    noise_sigma: float = 0.1,
    dropout: float = 0.0,
    generator: torch.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Confidence-weighted pooling over virtual hyperedges.

    Returns ``(pooled, probs, logits)``.  Training uses the full probability
    weighted average with Gaussian logit noise and expert dropout (dropped
    experts get a masked logit); inference renormalises over the ``top_k``
    most confident experts.
    """
    n_exp = xe_virtual.shape[-2]
    if not 1 <= top_k <= n_exp:
        raise ValueError(f"top_k={top_k} outside [1, {n_exp}]")
    logits = gate(xe_virtual)
    if training:
        if noise_sigma > 0:
            logits = logits + noise_sigma * torch.randn(logits.shape, generator=generator, dtype=logits.dtype)
        if dropout > 0:
            drop = torch.rand(logits.shape, generator=generator, dtype=logits.dtype) < dropout
            drop &= ~drop.all(dim=-1, keepdim=True)
            logits = logits.masked_fill(drop, core.MASK_VALUE)
        probs = torch.softmax(logits, dim=-1)
        pooled = (probs.unsqueeze(-1) * xe_virtual).sum(dim=-2)
        return pooled, probs, logits
    probs = torch.softmax(logits, dim=-1)
    order = torch.argsort(-probs.detach(), dim=-1, stable=True)[..., :top_k]
    sel = torch.zeros_like(probs, dtype=torch.bool).scatter(-1, order, True)
    weights = probs * sel
    weights = weights / weights.sum(dim=-1, keepdim=True)
    pooled = (weights.unsqueeze(-1) * xe_virtual).sum(dim=-2)
    return pooled, probs, logits


class ExpertGate(nn.Module):
    """Per-expert affine confidence: ``score_e = <x_e, W[:, e]> + b_e``."""

    def __init__(self, d_f: int, n_experts: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_f, n_experts))
        self.bias = nn.Parameter(torch.zeros(n_experts))

    def forward(self, xe_virtual: Tensor) -> Tensor:
        if xe_virtual.shape[-2:] != self.weight.T.shape:
            raise core.ShapeError("expert_gate", [xe_virtual.shape, self.weight.shape])
        return (xe_virtual * self.weight.T).sum(dim=-1) + self.bias


def image_pool(xv_image: Tensor) -> Tensor:
    if xv_image.shape[-2] < 1:
        raise ValueError("image pooling needs at least one image vertex")
    return xv_image.mean(dim=-2)


class HgVT(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        dims = cfg.dims
        if seed is not None:
            torch.manual_seed(seed)
        self.patch_embed = PatchEmbed(cfg)
        self.virtual_vertices = nn.Parameter(torch.empty(dims.n_virtual_vertices, cfg.d_f))
        self.edges = nn.Parameter(torch.empty(dims.n_edges, cfg.d_f))
        if not cfg.tied_adjacency:
            self.vertex_adj = nn.Parameter(torch.empty(dims.n_vertices, cfg.d_a))
            self.edge_adj = nn.Parameter(torch.empty(dims.n_edges, cfg.d_a))
        if cfg.drop_decay and cfg.depth > 1:
            rates = [cfg.path_drop * i / (cfg.depth - 1) for i in range(cfg.depth)]
        else:
            rates = [cfg.path_drop] * cfg.depth
        self.blocks = nn.ModuleList([HgVTBlock(cfg, r) for r in rates])
        self.gate = ExpertGate(cfg.d_f, dims.n_virtual_edges) if cfg.pooling.startswith("expert") else None
        self.head = nn.Linear(cfg.head_width, cfg.num_classes)
        self.register_buffer("allowed", hierarchy_mask(dims), persistent=False)
        self._init_weights()
        self.double()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        for p in (self.virtual_vertices, self.edges):
            nn.init.normal_(p, std=1.0)
        if not self.cfg.tied_adjacency:
            nn.init.normal_(self.vertex_adj, std=1.0)
            nn.init.normal_(self.edge_adj, std=1.0)
        if self.gate is not None:
            nn.init.normal_(self.gate.weight, std=0.02)

    def init_state(self, images: Tensor) -> FeatureState:
        dims = self.cfg.dims
        xv_img = self.patch_embed(images)
        b = xv_img.shape[0]
        if xv_img.shape[1] != dims.n_image_vertices:
            raise core.ShapeError("init_state", [xv_img.shape], f"expected {dims.n_image_vertices} image vertices")
        xv = torch.cat([xv_img, self.virtual_vertices.expand(b, -1, -1)], dim=1)
        xe = self.edges.expand(b, -1, -1)
        if self.cfg.tied_adjacency:
            # replaced by projections inside every block
            xv_adj = xv.new_zeros(b, dims.n_vertices, self.cfg.d_a)
            xe_adj = xv.new_zeros(b, dims.n_edges, self.cfg.d_a)
        else:
            xv_adj = self.vertex_adj.expand(b, -1, -1)
            xe_adj = self.edge_adj.expand(b, -1, -1)
        return FeatureState(xv, xe, xv_adj, xe_adj)

    def forward(
        self,
        images: Tensor,
        *,
        generator: torch.Generator | None = None,
        sparse: bool = False,
        timer=None,
    ) -> ForwardOutput:
        cfg, dims = self.cfg, self.cfg.dims
        if timer is not None:
            with timer("patch"):
                state = self.init_state(images)
        else:
            state = self.init_state(images)
        adjacencies, layer_states = [], []
        for block in self.blocks:
            layer_states.append(state)
            state, adj = block(state, self.allowed, generator=generator, sparse=sparse, timer=timer)
            adjacencies.append(adj)

        iv, pe = dims.n_image_vertices, dims.n_primary_edges
        gate_probs = gate_logits = None
        extras = {}
        if cfg.pooling == "average":
            rows = state.xe if cfg.average_scope == "all" else state.xe[:, :pe]
            pooled = rows.mean(dim=1)
            head_in = pooled
        elif cfg.pooling == "image":
            pooled = head_in = image_pool(state.xv[:, :iv])
        else:
            expert, gate_probs, gate_logits = expert_pool(
                state.xe[:, pe:], self.gate, training=self.training, top_k=cfg.expert_top_k,
                noise_sigma=cfg.expert_noise, dropout=cfg.expert_dropout, generator=generator,
            )
            extras["expert_pooled"] = expert
            if cfg.pooling == "expert":
                pooled = head_in = expert
            else:
                img = image_pool(state.xv[:, :iv])
                extras["image_pooled"] = img
                pooled = torch.cat([img, expert], dim=-1)
                head_in = expert if cfg.drop_image_at_head else pooled
        logits = self.head(head_in)
        return ForwardOutput(logits, adjacencies, layer_states, state, pooled, gate_probs, gate_logits, extras)


def forward_classify(model: HgVT, images: Tensor, mode: str = "infer", *,
                     generator: torch.Generator | None = None, sparse: bool = False) -> ForwardOutput:
    """Run the model in ``"train"`` (noise, dropout, path drop) or ``"infer"`` mode.

    A single ``(C, H, W)`` image yields unbatched outputs.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if images.dim() == 3:
        out = forward_classify(model, images.unsqueeze(0), mode, generator=generator, sparse=sparse)
        return _unbatch(out)
    was_training = model.training
    model.train(mode == "train")
    try:
        if mode == "infer":
            with torch.no_grad():
                return model(images, generator=generator, sparse=sparse)
        return model(images, generator=generator, sparse=sparse)
    finally:
        model.train(was_training)


def _unbatch(out: ForwardOutput) -> ForwardOutput:
    first = lambda t: None if t is None else t[0]  # noqa: E731
    return ForwardOutput(
        out.logits[0],
        [Adjacency(a.soft[0], a.hard[0], a.alpha) for a in out.adjacencies],
        [s.select(0) for s in out.layer_states],
        out.state.select(0),
        out.pooled[0],
        first(out.gate_probs),
        first(out.gate_logits),
        {k: v[0] for k, v in out.extras.items()},
    )


# -- analytic accounting ---------------------------------------------------


def count_params(cfg: ModelConfig) -> int:
    """Closed-form learned-parameter count under this package's layer conventions."""
    d_f, d_a, dims = cfg.d_f, cfg.d_a, cfg.dims
    total = 0
    # stem
    if cfg.stem == "patch_projection":
        total += cfg.in_channels * cfg.patch_size**2 * d_f + d_f
    else:
        c_in = cfg.in_channels
        for c_out in stem_channels(cfg):
            total += c_in * c_out * 9 + c_out + 2 * c_out  # conv + bias + BN affine
            c_in = c_out
        total += c_in * d_f + d_f
    # learned graph embeddings
    total += dims.n_virtual_vertices * d_f + dims.n_edges * d_f
    if not cfg.tied_adjacency:
        total += dims.n_vertices * d_a + dims.n_edges * d_a
    # blocks
    hidden = cfg.ffn_hidden
    b = 1 if cfg.ffn_bias else 0
    norms = 4 * d_a + 7 * d_f
    attn = 4 * d_f * d_f * 3 - (2 * d_f * d_f if cfg.tied_attention else 0)
    out_width = d_f if cfg.tied_adjacency else d_f + d_a
    ffn = (d_a + d_f) * 2 * hidden + b * 2 * hidden + hidden * out_width + b * out_width
    n_ffn = 1 if cfg.joint_ffn else 2
    adj_proj = 2 * d_f * d_a if cfg.tied_adjacency else 0
    total += cfg.depth * (norms + attn + n_ffn * ffn + adj_proj)
    # heads
    if cfg.pooling.startswith("expert"):
        total += d_f * dims.n_virtual_edges + dims.n_virtual_edges
    total += cfg.head_width * cfg.num_classes + cfg.num_classes
    return total


def count_flops(cfg: ModelConfig, resolution: int | None = None, flops_per_mac: int = 1) -> int:
    """Analytic forward cost with dense attention, in multiply-accumulates.

    ``flops_per_mac=2`` converts to arithmetic operation count.  Elementwise
    work (norms, softmax, activations) is not counted.
    """
    res = cfg.image_size if resolution is None else resolution
    if res % cfg.patch_size:
        raise ValueError(f"resolution {res} not divisible by patch {cfg.patch_size}")
    d_f, d_a, dims = cfg.d_f, cfg.d_a, cfg.dims
    n_iv = (res // cfg.patch_size) ** 2
    nv = n_iv + dims.n_virtual_vertices
    ne = dims.n_edges
    macs = 0
    if cfg.stem == "patch_projection":
        macs += n_iv * cfg.in_channels * cfg.patch_size**2 * d_f
    else:
        side, c_in = res, cfg.in_channels
        for c_out in stem_channels(cfg):
            side = (side + 1) // 2
            macs += side * side * c_in * c_out * 9
            c_in = c_out
        macs += side * side * c_in * d_f
    per_block = nv * ne * d_a  # adjacency
    if cfg.tied_adjacency:
        per_block += (nv + ne) * d_f * d_a
    per_block += 4 * nv * d_f * d_f + 2 * nv * nv * d_f  # vertex self-attention
    kv_agg = 0 if cfg.tied_attention else 2 * nv * d_f * d_f
    per_block += 2 * ne * d_f * d_f + kv_agg + 2 * ne * nv * d_f  # aggregate
    per_block += 2 * nv * d_f * d_f + 2 * ne * d_f * d_f + 2 * nv * ne * d_f  # distribute
    out_width = d_f if cfg.tied_adjacency else d_f + d_a
    per_block += (nv + ne) * ((d_a + d_f) * 2 * cfg.ffn_hidden + cfg.ffn_hidden * out_width)
    macs += cfg.depth * per_block
    if cfg.pooling.startswith("expert"):
        macs += dims.n_virtual_edges * d_f
    macs += cfg.head_width * cfg.num_classes
    return macs * flops_per_mac
