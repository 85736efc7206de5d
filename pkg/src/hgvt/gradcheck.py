"""Finite-difference verification of every loss and of a full model forward-to-loss pass."""

from __future__ import annotations

import torch

from .config import ModelConfig, preset
from .core import GradcheckReport, directional_check, finite_diff_check
from .hypergraph import form_soft_adjacency, pairwise_diversity, population_loss
from .model import HgVT
from .training import classification_loss, expert_confidence_loss, expert_density_loss, total_loss


def _rand(gen: torch.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    return scale * torch.randn(*shape, generator=gen, dtype=torch.float64)


def loss_checks(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> dict[str, GradcheckReport]:
    gen = torch.Generator().manual_seed(seed)
    labels = torch.tensor([0, 2, 1, 3, 2])
    reports = {
        "ce": finite_diff_check(lambda z: classification_loss(z, labels, 0.1), _rand(gen, 5, 4), step, tol),
        "diversity": finite_diff_check(pairwise_diversity, _rand(gen, 6, 5), step, tol),
    }
    xe = _rand(gen, 4, 6)
    reports["population"] = finite_diff_check(
        lambda xv: population_loss(form_soft_adjacency(xv, xe, 4.0), beta=2.0, gamma=0.5), _rand(gen, 9, 6), step, tol
    )
    reports["expert_density"] = finite_diff_check(
        lambda z: expert_density_loss(torch.softmax(z, -1)), _rand(gen, 6, 3), step, tol
    )
    reports["expert_confidence"] = finite_diff_check(
        lambda z: expert_confidence_loss(torch.softmax(z, -1)), _rand(gen, 6, 3), step, tol
    )
    return reports


def model_checks(cfg: ModelConfig | None = None, seed: int = 0, step: float = 1e-5, tol: float = 1e-4,
                 directions: int = 3) -> dict[str, GradcheckReport]:
    """Total loss of a train-mode forward pass (noise, expert dropout and path drop replayed from a fixed seed)."""
    cfg = cfg or preset("nano")
    model = HgVT(cfg, seed=seed)
    model.train()
    gen = torch.Generator().manual_seed(seed + 1)
    images = _rand(gen, 2, cfg.in_channels, cfg.image_size, cfg.image_size)
    labels = torch.arange(2) % cfg.num_classes
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.eval()  # running-stat updates would make repeated evaluations differ

    def loss_fn() -> torch.Tensor:
        g = torch.Generator().manual_seed(seed + 2)
        return total_loss(model(images, generator=g), labels, cfg)[0]

    params = [p for p in model.parameters() if p.requires_grad]
    reports = {}
    for k in range(directions):
        reports[f"model_direction_{k}"] = directional_check(loss_fn, params, step, tol, seed=seed + 10 + k)

    base = model.virtual_vertices.detach().clone()

    def of_virtual(x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            model.virtual_vertices.copy_(x)
        return loss_fn()

    def grad_virtual() -> torch.Tensor:
        with torch.no_grad():
            model.virtual_vertices.copy_(base)
        model.zero_grad()
        loss_fn().backward()
        return model.virtual_vertices.grad.detach().clone()

    g = grad_virtual()
    reports["model_virtual_vertices"] = finite_diff_check(of_virtual, base, step, tol, grad=g)
    with torch.no_grad():
        model.virtual_vertices.copy_(base)
    return reports


def run_all(cfg: ModelConfig | None = None, seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> dict[str, GradcheckReport]:
    reports = loss_checks(seed, step, tol)
    reports.update(model_checks(cfg, seed, step, tol))
    return reports
