"""Loss assembly, optimiser/schedule, synthetic data and the training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .checkpoint import save_checkpoint
from .config import ModelConfig, TrainConfig
from .hypergraph import diversity_loss, pairwise_diversity, population_density, population_loss
from .metrics import graph_report, mean_reports, sparsity
from .model import ForwardOutput, HgVT

LOSS_KEYS = ("ce", "pop", "div", "density", "confidence", "total")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, breakdown: dict[str, float]):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


# -- losses ----------------------------------------------------------------


def classification_loss(logits: Tensor, labels: Tensor, smoothing: float = 0.1) -> Tensor:
    return F.cross_entropy(logits, labels, label_smoothing=smoothing)


def expert_density_loss(probs: Tensor) -> Tensor:
    """Load balancing: ``n_experts * sum_e f_e * mean_prob_e`` with ``f_e`` the argmax share."""
    probs = probs.reshape(-1, probs.shape[-1])
    n = probs.shape[-1]
    frac = F.one_hot(probs.detach().argmax(dim=-1), n).to(probs.dtype).mean(dim=0)
    return n * (frac * probs.mean(dim=0)).sum()


def expert_confidence_loss(probs: Tensor, smoothing: float = 0.0) -> Tensor:
    """Cross-entropy of the gate distribution against its own (gradient-stopped) argmax."""
    probs = probs.reshape(-1, probs.shape[-1])
    n = probs.shape[-1]
    target = F.one_hot(probs.detach().argmax(dim=-1), n).to(probs.dtype)
    if smoothing:
        target = target * (1 - smoothing) + smoothing / n
    return -(target * torch.log(probs.clamp_min(1e-300))).sum(dim=-1).mean()


def total_loss(out: ForwardOutput, labels: Tensor, cfg: ModelConfig, smoothing: float = 0.1) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted sum of classification and structural losses, with a per-component breakdown.

    Structural terms are averaged over layers: population on each block's
    adjacency, diversity on the state entering each block.
    """
    dims = cfg.dims
    zero = out.logits.new_zeros(())
    parts = {"ce": classification_loss(out.logits, labels, smoothing)}
    cols = slice(0, dims.n_primary_edges) if cfg.population_scope == "primary" else None
    if out.adjacencies:
        parts["pop"] = torch.stack([
            population_loss(a.soft, cfg.population_max, cfg.gamma, cols) for a in out.adjacencies
        ]).mean()
        parts["div"] = torch.stack([diversity_loss(s, dims) for s in out.layer_states]).mean()
    else:
        parts["pop"] = parts["div"] = zero
    if out.gate_probs is not None:
        parts["density"] = expert_density_loss(out.gate_probs)
        parts["confidence"] = expert_confidence_loss(out.gate_probs, cfg.expert_label_smoothing)
    else:
        parts["density"] = parts["confidence"] = zero
    total = (
        parts["ce"]
        + cfg.lambda_pop * parts["pop"]
        + cfg.lambda_div * parts["div"]
        + cfg.lambda_exp * (parts["density"] + cfg.lambda_ce * parts["confidence"])
    )
    parts["total"] = total
    return total, parts


# -- optimisation ----------------------------------------------------------


def param_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    """Decay matrices and embeddings; exempt norms, biases and the gate bias (all 1-D)."""
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.dim() >= 2 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def make_optimizer(model: torch.nn.Module, tc: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(param_groups(model, tc.weight_decay), lr=tc.peak_lr, betas=tc.betas, eps=tc.eps)


def lr_at(step: int, total: int, warmup: int, peak: float, min_lr: float) -> float:
    """Linear warmup reaching ``peak`` at step ``warmup - 1``, then cosine to ``min_lr`` at ``total - 1``."""
    if warmup >= total:
        raise ValueError(f"warmup ({warmup}) must be shorter than the run ({total})")
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(total - 1 - warmup, 1)
    t = min((step - warmup) / span, 1.0)
    return min_lr + (peak - min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


# -- data ------------------------------------------------------------------


class SyntheticDataset:
    """Class-conditioned blob and texture images, each generated from ``(seed, index)``.

    Class ``k`` fixes a colour, a stripe orientation/frequency and a blob
    quadrant; per-sample randomness jitters position, phase, contrast and
    adds pixel noise.
    """

    MEAN = 0.5
    STD = 0.25

    def __init__(self, n: int, num_classes: int, image_size: int, channels: int = 3, seed: int = 0):
        self.n, self.num_classes, self.size, self.channels, self.seed = n, num_classes, image_size, channels, seed
        proto = np.random.default_rng([seed, 2**31 - 1])
        self.colours = proto.uniform(0.1, 0.9, size=(num_classes, channels))
        self.angles = np.pi * np.arange(num_classes) / num_classes
        self.freqs = 1.0 + (np.arange(num_classes) % 3)

    def __len__(self) -> int:
        return self.n

    def label(self, index: int) -> int:
        return index % self.num_classes

    def image(self, index: int) -> np.ndarray:
        if not 0 <= index < self.n:
            raise IndexError(index)
        k = self.label(index)
        rng = np.random.default_rng([self.seed, index])
        s = self.size
        yy, xx = np.meshgrid(np.linspace(0, 1, s), np.linspace(0, 1, s), indexing="ij")
        quad = k % 4
        cy = (0.25 if quad < 2 else 0.75) + rng.normal(0, 0.05)
        cx = (0.25 if quad % 2 == 0 else 0.75) + rng.normal(0, 0.05)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.18**2))
        a = self.angles[k]
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * self.freqs[k] * (np.cos(a) * xx + np.sin(a) * yy) * 2 + rng.uniform(0, 2 * np.pi))
        contrast = rng.uniform(0.7, 1.0)
        img = contrast * (0.6 * blob + 0.4 * stripes)[None] * self.colours[k][:, None, None]
        img = img + rng.normal(0, 0.05, size=img.shape)
        return img

    def batch(self, indices: Iterable[int]) -> tuple[Tensor, Tensor]:
        idx = list(indices)
        imgs = np.stack([self.image(i) for i in idx])
        x = torch.from_numpy((imgs - self.MEAN) / self.STD)
        y = torch.tensor([self.label(i) for i in idx], dtype=torch.long)
        return x, y

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"n": self.n, "num_classes": self.num_classes, "image_size": self.size,
                "channels": self.channels, "seed": self.seed}
        (d / "dataset.json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "SyntheticDataset":
        meta = json.loads((Path(directory) / "dataset.json").read_text())
        return cls(meta["n"], meta["num_classes"], meta["image_size"], meta["channels"], meta["seed"])


def hflip(x: Tensor, generator: torch.Generator) -> Tensor:
    flip = torch.rand(x.shape[0], generator=generator) < 0.5
    return torch.where(flip[:, None, None, None], x.flip(-1), x)


# -- loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: HgVT
    log: list[dict]
    steps: int


def _hard_sparsity(out: ForwardOutput) -> float:
    return float(np.mean([sparsity(a.hard.detach().numpy()) for a in out.adjacencies])) if out.adjacencies else 0.0


def total_steps(n: int, tc: TrainConfig) -> int:
    if tc.steps is not None:
        return tc.steps
    return tc.epochs * math.ceil(n / tc.batch_size)


def train(
    dataset: SyntheticDataset,
    cfg: ModelConfig,
    tc: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train from scratch; deterministic for a given ``tc.seed``.

    Writes ``metrics.ndjson`` and ``model.hgvt`` into ``out_dir`` when given.
    """
    torch.manual_seed(tc.seed)
    model = HgVT(cfg, seed=tc.seed)
    n_steps = total_steps(len(dataset), tc)
    opt = make_optimizer(model, tc)
    gen = torch.Generator().manual_seed(tc.seed)
    order_rng = np.random.default_rng(tc.seed)
    order: list[int] = []
    log: list[dict] = []
    sink = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sink = (out / "metrics.ndjson").open("w")
    warmup = min(tc.warmup_steps, max(n_steps - 1, 0))
    model.train()
    try:
        for step in range(n_steps):
            if len(order) < tc.batch_size:
                order.extend(order_rng.permutation(len(dataset)).tolist())
            idx, order = order[: tc.batch_size], order[tc.batch_size :]
            x, y = dataset.batch(idx)
            if tc.hflip:
                x = hflip(x, gen)
            lr = lr_at(step, n_steps, warmup, tc.peak_lr, tc.peak_lr * tc.min_lr_ratio) if n_steps > 1 else tc.peak_lr
            for g in opt.param_groups:
                g["lr"] = lr
            out_fwd = model(x, generator=gen)
            loss, parts = total_loss(out_fwd, y, cfg, tc.label_smoothing)
            breakdown = {k: float(v.detach()) for k, v in parts.items()}
            if not math.isfinite(breakdown["total"]):
                raise TrainingDiverged(step, breakdown)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip))
            opt.step()
            acc = float((out_fwd.logits.argmax(-1) == y).double().mean())
            if step % tc.log_every == 0 or step == n_steps - 1:
                rec = {"step": step, "lr": lr, **breakdown, "grad_norm": grad_norm,
                       "sparsity": _hard_sparsity(out_fwd), "acc": acc}
                log.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
    finally:
        if sink:
            sink.close()
    model.eval()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "model.hgvt", model, cfg, {"steps": n_steps, "seed": tc.seed})
    return TrainResult(model, log, n_steps)


def evaluate(model: HgVT, dataset: SyntheticDataset, indices: Iterable[int], scope: str = "iV",
             batch_size: int = 32) -> dict[str, float]:
    """Top-1 accuracy and final-layer graph metrics averaged over images."""
    idx = list(indices)
    correct, reports = 0, []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(idx), batch_size):
            x, y = dataset.batch(idx[i : i + batch_size])
            out = model(x)
            correct += int((out.logits.argmax(-1) == y).sum())
            adj = out.adjacencies[-1] if out.adjacencies else None
            if adj is None:
                continue
            for b in range(x.shape[0]):
                reports.append(graph_report(adj.soft[b].numpy(), adj.hard[b].numpy(),
                                            out.state.xv[b].numpy(), model.cfg.dims, scope))
    res = {"top1": correct / max(len(idx), 1)}
    if reports:
        res.update(mean_reports(reports))
    return res


# -- regulariser studies ---------------------------------------------------


@dataclass
class SweepCell:
    """Population bounds: ``beta`` as a fraction of |V|; ``gamma`` a fraction unless ``gamma_absolute``.

    ``beta=None`` and ``gamma=None`` disable the population penalty.
    """

    beta: float | None
    gamma: float | None
    gamma_absolute: bool = False

    def resolve(self, n_vertices: int) -> tuple[float, float] | None:
        if self.beta is None and self.gamma is None:
            return None
        if self.beta is None or self.gamma is None:
            raise ValueError("set both bounds or neither")
        beta = self.beta * n_vertices
        gamma = self.gamma if self.gamma_absolute else self.gamma * n_vertices
        if not beta > gamma >= 0:
            raise ValueError(f"need beta > gamma >= 0, got beta={beta}, gamma={gamma}")
        return beta, gamma


def population_sweep(
    grid: list[SweepCell],
    cfg: ModelConfig,
    tc: TrainConfig,
    dataset: SyntheticDataset,
    eval_indices: Iterable[int],
) -> list[dict]:
    """Train one model per grid cell and report accuracy and graph metrics."""
    for cell in grid:  # validate everything before spending compute
        cell.resolve(cfg.dims.n_vertices)
    rows = []
    eval_indices = list(eval_indices)
    for cell in grid:
        bounds = cell.resolve(cfg.dims.n_vertices)
        run_cfg = cfg.replace(lambda_pop=0.0) if bounds is None else cfg.replace(beta=bounds[0], gamma=bounds[1])
        result = train(dataset, run_cfg, tc)
        row = {"beta": cell.beta, "gamma": cell.gamma, "gamma_absolute": cell.gamma_absolute}
        row.update(evaluate(result.model, dataset, eval_indices))
        rows.append(row)
    return rows


def optimize_diversity(rows: int = 8, dim: int = 16, steps: int = 500, lr: float = 0.02, seed: int = 0) -> dict:
    """Minimise the diversity penalty alone from a random matrix; report the worst off-diagonal cosine."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(rows, dim, generator=gen, dtype=torch.float64).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for _ in range(steps):
        opt.zero_grad()
        loss = pairwise_diversity(x)
        loss.backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        xn = x / x.norm(dim=-1, keepdim=True)
        cos = (xn @ xn.T).abs().fill_diagonal_(0)
    return {"max_abs_cos": float(cos.max()), "loss": float(pairwise_diversity(x.detach()))}


def optimize_population(
    n_vertices: int = 24,
    n_edges: int = 8,
    d_a: int = 16,
    beta: float | None = None,
    gamma: float = 0.5,
    steps: int = 300,
    lr: float = 0.05,
    alpha: float = 4.0,
    seed: int = 0,
    margin: float = 0.05,
) -> dict:
    """Minimise the population penalty alone over free adjacency features."""
    from .hypergraph import form_soft_adjacency

    beta = n_vertices / 6 if beta is None else beta
    gen = torch.Generator().manual_seed(seed)
    xv = torch.randn(n_vertices, d_a, generator=gen, dtype=torch.float64).requires_grad_(True)
    xe = torch.randn(n_edges, d_a, generator=gen, dtype=torch.float64).requires_grad_(True)
    opt = torch.optim.Adam([xv, xe], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = population_loss(form_soft_adjacency(xv, xe, alpha), beta, gamma)
        loss.backward()
        opt.step()
    with torch.no_grad():
        soft = form_soft_adjacency(xv, xe, alpha)
        p = population_density(soft)
        ok = (p >= gamma - margin) & (p <= beta + margin)
        final = float(population_loss(soft, beta, gamma))
    return {"fraction_in_range": float(ok.double().mean()), "loss": final, "density": p.tolist(),
            "beta": beta, "gamma": gamma}
