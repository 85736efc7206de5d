"""Learned centroid bins for hyperedge features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class CentroidHasher:
    centroids: np.ndarray  # (H, d)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)

    @property
    def n_bins(self) -> int:
        return self.centroids.shape[0]

    def assign(self, features: np.ndarray) -> np.ndarray:
        """Nearest centroid (Euclidean) per row; ties go to the lowest bin index."""
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        d2 = ((f[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        return np.argmin(d2, axis=1)

    def save(self, path) -> None:
        np.save(path, self.centroids)

    @classmethod
    def load(cls, path) -> "CentroidHasher":
        return cls(np.load(path))


def hash_assign(hasher: CentroidHasher, feature: np.ndarray) -> int:
    return int(hasher.assign(feature)[0])


def kmeans_pp_init(features: np.ndarray, h: int, rng: np.random.Generator) -> np.ndarray:
    n = features.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((features - features[chosen[0]]) ** 2).sum(-1)
    for _ in range(1, h):
        total = d2.sum()
        nxt = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((features - features[nxt]) ** 2).sum(-1))
    return features[chosen].copy()


def centroid_objective(y: torch.Tensor, c: torch.Tensor, lambda_icd: float, lambda_den: float) -> torch.Tensor:
    """Pull each feature to its nearest centroid, push its second-nearest away, balance bin load."""
    d2 = torch.cdist(y, c).pow(2)
    two = torch.topk(d2, 2, dim=1, largest=False).indices
    near = d2.gather(1, two[:, :1]).squeeze(1)
    second = d2.gather(1, two[:, 1:]).squeeze(1)
    h = c.shape[0]
    probs = torch.softmax(-d2, dim=1)
    frac = torch.nn.functional.one_hot(two[:, 0], h).to(y.dtype).mean(0)
    density = h * (frac * probs.mean(0)).sum()
    return (near - lambda_icd * second).mean() + lambda_den * density


def train_centroids(
    features: np.ndarray,
    h: int = 10,
    lr: float = 4e-3,
    lambda_icd: float = 0.1,
    lambda_den: float = 0.5,
    batch: int = 512,
    epochs: int = 8,
    seed: int = 0,
) -> CentroidHasher:
    """k-means++ seeding followed by Adam on :func:`centroid_objective`."""
    features = np.asarray(features, dtype=np.float64)
    if h < 2:
        raise ValueError("need at least two bins")
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("empty feature set")
    if features.shape[0] < h:
        raise ValueError(f"{features.shape[0]} features cannot seed {h} bins")
    rng = np.random.default_rng(seed)
    c = torch.tensor(kmeans_pp_init(features, h, rng), requires_grad=True)
    y_all = torch.from_numpy(features)
    opt = torch.optim.Adam([c], lr=lr)
    for _ in range(epochs):
        perm = torch.from_numpy(rng.permutation(features.shape[0]))
        for start in range(0, features.shape[0], batch):
            y = y_all[perm[start : start + batch]]
            opt.zero_grad()
            centroid_objective(y, c, lambda_icd, lambda_den).backward()
            opt.step()
    return CentroidHasher(c.detach().numpy().copy())


def bin_diversity(hasher: CentroidHasher, features: np.ndarray) -> float:
    """Normalised entropy of bin occupancy (1 = perfectly uniform)."""
    counts = np.bincount(hasher.assign(features), minlength=hasher.n_bins).astype(np.float64)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / np.log(hasher.n_bins))
