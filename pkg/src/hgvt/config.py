"""Model and training configuration, with the named scale presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

POOLING_MODES = ("average", "image", "expert", "expert_image")
STEMS = ("conv_stem", "patch_projection")
MODULATIONS = ("standard", "modified")


@dataclass(frozen=True)
class GraphDims:
    """Element counts of the bipartite hypergraph.

    Vertices are ordered ``[image | virtual]`` and hyperedges ``[primary | virtual]``.
    """

    n_image_vertices: int
    n_virtual_vertices: int
    n_primary_edges: int
    n_virtual_edges: int

    def __post_init__(self):
        counts = dataclasses.astuple(self)
        if any(int(c) != c or c < 0 for c in counts):
            raise ValueError(f"graph dims must be non-negative integers, got {counts}")
        if self.n_image_vertices < 1 or self.n_primary_edges < 1:
            raise ValueError("need at least one image vertex and one primary hyperedge")

    @property
    def n_vertices(self) -> int:
        return self.n_image_vertices + self.n_virtual_vertices

    @property
    def n_edges(self) -> int:
        return self.n_primary_edges + self.n_virtual_edges


@dataclass
class ModelConfig:
    dims: GraphDims
    d_f: int
    d_a: int
    depth: int
    heads: int
    patch_size: int
    image_size: int
    in_channels: int = 3
    num_classes: int = 1000
    stem: str = "conv_stem"
    pooling: str = "expert_image"
    average_scope: str = "all"  # "all" hyperedges or "primary" only
    drop_image_at_head: bool = False
    expert_top_k: int = 1
    # structure / regularisation
    alpha: float = 4.0
    beta: float | None = None  # None -> |V| / 6
    gamma: float = 0.5
    population_scope: str = "all"  # "all" columns or "primary" only
    lambda_pop: float = 1.0
    lambda_div: float = 1.0
    lambda_exp: float = 1.0
    lambda_ce: float = 0.1
    expert_noise: float = 0.1
    expert_dropout: float = 0.1
    expert_label_smoothing: float = 0.0
    # architecture switches
    modulation: str = "modified"
    scale_attention: bool = False
    joint_ffn: bool = True
    tied_adjacency: bool = False
    tied_attention: bool = False
    mlp_ratio: float = 5.0
    ffn_bias: bool = True
    path_drop: float = 0.1
    drop_decay: bool = True

    def __post_init__(self):
        if isinstance(self.dims, dict):
            self.dims = GraphDims(**self.dims)
        if self.d_f % self.heads:
            raise ValueError(f"d_f={self.d_f} not divisible by heads={self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        side = self.image_size // self.patch_size
        if side * side != self.dims.n_image_vertices:
            raise ValueError(
                f"|iV|={self.dims.n_image_vertices} does not match ({self.image_size}/{self.patch_size})^2"
            )
        if self.stem not in STEMS:
            raise ValueError(f"unknown stem {self.stem!r}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.modulation not in MODULATIONS:
            raise ValueError(f"unknown modulation {self.modulation!r}")
        if self.pooling.startswith("expert"):
            if self.dims.n_virtual_edges < 1:
                raise ValueError("expert pooling needs at least one virtual hyperedge")
            if not 1 <= self.expert_top_k <= self.dims.n_virtual_edges:
                raise ValueError("expert_top_k must be in [1, |vE|]")

    @property
    def population_max(self) -> float:
        return self.dims.n_vertices / 6 if self.beta is None else self.beta

    @property
    def ffn_hidden(self) -> int:
        return int(round(2 / 3 * self.mlp_ratio * (self.d_f + self.d_a)))

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def pooled_width(self) -> int:
        return 2 * self.d_f if self.pooling == "expert_image" else self.d_f

    @property
    def head_width(self) -> int:
        if self.pooling == "expert_image" and self.drop_image_at_head:
            return self.d_f
        return self.pooled_width

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        if "preset" in data:
            base = preset(data.pop("preset")).to_dict()
            base.update(data)
            data = base
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _preset_table() -> dict[str, ModelConfig]:
    return {
        "mu": ModelConfig(
            dims=GraphDims(64, 5, 8, 4), d_f=64, d_a=64, depth=10, heads=2,
            patch_size=4, image_size=32, num_classes=100, pooling="expert",
            beta=10.05, drop_decay=False,
        ),
        "lt": ModelConfig(
            dims=GraphDims(100, 12, 32, 6), d_f=128, d_a=64, depth=12, heads=4,
            patch_size=16, image_size=160, num_classes=100, beta=20.7,
        ),
        "ti": ModelConfig(
            dims=GraphDims(196, 16, 50, 8), d_f=128, d_a=64, depth=12, heads=4,
            patch_size=16, image_size=224, num_classes=1000, beta=36.04,
        ),
        "s": ModelConfig(
            dims=GraphDims(196, 16, 50, 8), d_f=224, d_a=96, depth=14, heads=7,
            patch_size=16, image_size=224, num_classes=1000, beta=36.04,
        ),
        # test-sized configuration, not a published scale
        "nano": ModelConfig(
            dims=GraphDims(16, 3, 4, 2), d_f=16, d_a=8, depth=2, heads=2,
            patch_size=4, image_size=16, num_classes=4, stem="patch_projection",
        ),
    }


PRESETS = tuple(_preset_table())


def preset(name: str) -> ModelConfig:
    table = _preset_table()
    try:
        return table[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}") from None


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    label_smoothing: float = 0.1
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set
    warmup_steps: int = 10
    min_lr_ratio: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    log_every: int = 1
    hflip: bool = True

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    """Everything a ``train`` invocation needs, as read from one JSON file."""

    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        raw = json.loads(Path(path).read_text())
        if "model" not in raw:
            # bare model config file
            return cls(model=ModelConfig.from_dict(raw))
        return cls(
            model=ModelConfig.from_dict(raw["model"]),
            train=TrainConfig.from_dict(raw.get("train", {})),
            data=dict(raw.get("data", {})),
        )
