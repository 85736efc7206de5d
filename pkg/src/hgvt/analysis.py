"""Graph-slice export, class-to-expert assignment and per-component timing."""

from __future__ import annotations

import contextlib
import json
import statistics
import time
from collections import defaultdict

import numpy as np
import torch

from .model import HgVT, forward_classify

SECTIONS = ("patch", "spatial", "ffn", "cluster", "aggregate", "distribute")


# -- graph slices ----------------------------------------------------------


def export_graph_slices(model: HgVT, image: torch.Tensor, h: int = 5, threshold: float = 0.1) -> dict:
    """Describe the final hypergraph around the most confident expert as a JSON-ready document.

    A virtual vertex's contribution is its membership in the root expert,
    normalised over virtual vertices.  Vertices above ``threshold`` (at most
    ``h``) are direct; each lists its ``h`` strongest primary hyperedges with
    per-patch membership intensities.  Primary hyperedges listed under several
    direct vertices share one duplicate marker.
    """
    cfg = model.cfg
    if not cfg.pooling.startswith("expert"):
        raise ValueError("graph slices need an expert-pooling checkpoint")
    if not cfg.depth:
        raise ValueError("graph slices need at least one block")
    dims = cfg.dims
    iv, pe = dims.n_image_vertices, dims.n_primary_edges
    out = forward_classify(model, image if image.dim() == 3 else image[0], "infer")
    soft = out.adjacencies[-1].soft.numpy()
    hard = out.adjacencies[-1].hard.numpy()
    probs = out.gate_probs.numpy()
    root = int(np.argmax(probs))
    root_col = pe + root
    raw = soft[iv:, root_col]
    contrib = raw / raw.sum()
    ranked = np.argsort(-contrib, kind="stable")
    direct = [int(v) for v in ranked if contrib[v] > threshold][:h]

    listed: dict[int, list[int]] = defaultdict(list)
    per_vnode = []
    for v in direct:
        row = soft[iv + v, :pe]
        edges = np.argsort(-row, kind="stable")[:h].tolist()
        for e in edges:
            listed[e].append(v)
        per_vnode.append((v, edges))
    dup_ids = sorted(e for e, vs in listed.items() if len(vs) > 1)
    marker = {e: k + 1 for k, e in enumerate(dup_ids)}

    direct_doc = []
    for v, edges in per_vnode:
        direct_doc.append({
            "vnode": v,
            "contribution": float(contrib[v]),
            "pedges": [{
                "pedge": int(e),
                "membership": float(soft[iv + v, e]),
                "duplicate_marker": marker.get(e),
                "intensity": [float(a) for a in soft[:iv, e]],
            } for e in edges],
        })

    selected = sorted(listed)
    indirect = []
    for v in range(dims.n_virtual_vertices):
        if v in direct:
            continue
        via = [int(e) for e in selected if hard[iv + v, e] > 0.5]
        if via:
            indirect.append({"vnode": v, "contribution": float(contrib[v]), "via_pedges": via})

    return {
        "root_expert": root,
        "root_confidence": float(probs[root]),
        "grid_side": cfg.grid_side,
        "threshold": threshold,
        "direct": direct_doc,
        "indirect": indirect,
    }


def dump_document(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- expert taxonomy -------------------------------------------------------


def assign_classes_to_experts(histograms, coverage: float = 0.80, ratio: float = 2 / 3) -> list[list[tuple[int, float]]]:
    """Per class, the experts that jointly carry its routing mass.

    Experts are taken in descending probability.  After taking one with mass
    ``p`` (remaining untaken mass ``r``), the next is taken iff
    ``p < ratio * (p + r)``; selection stops once the cumulative mass reaches
    ``coverage``.  Rows are normalised to sum to one.
    """
    hist = np.asarray(histograms, dtype=np.float64)
    if hist.ndim != 2 or hist.size == 0:
        raise ValueError("need a non-empty class x expert histogram")
    sums = hist.sum(axis=1, keepdims=True)
    if np.any(sums <= 0) or np.any(hist < 0):
        raise ValueError("histogram rows must be non-negative with positive mass")
    hist = hist / sums
    result = []
    for row in hist:
        order = np.argsort(-row, kind="stable")
        taken = [int(order[0])]
        cum = row[order[0]]
        for nxt in order[1:]:
            if cum >= coverage - 1e-12:
                break
            p = row[taken[-1]]
            rest = 1.0 - cum
            if not p < ratio * (p + rest):
                break
            taken.append(int(nxt))
            cum += row[nxt]
        result.append([(e, float(row[e])) for e in taken])
    return result


def expert_histograms(model: HgVT, images: torch.Tensor, labels: torch.Tensor, num_classes: int | None = None,
                      batch_size: int = 32) -> np.ndarray:
    """Per-class distribution of the argmax expert over a labelled set (rows without samples stay zero)."""
    n_cls = num_classes or model.cfg.num_classes
    hist = np.zeros((n_cls, model.cfg.dims.n_virtual_edges))
    for i in range(0, images.shape[0], batch_size):
        out = forward_classify(model, images[i : i + batch_size], "infer")
        top = out.gate_probs.argmax(-1).numpy()
        for y, e in zip(labels[i : i + batch_size].tolist(), top):
            hist[y, e] += 1
    return hist


# -- bench -----------------------------------------------------------------


class SectionTimer:
    def __init__(self):
        self.totals: dict[str, float] = defaultdict(float)

    @contextlib.contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - t0


def bench(model: HgVT, images: torch.Tensor, iters: int = 100, warmup: int = 10, sparse: bool = False) -> dict:
    """Mean and std wall time (ms) per component summed over layers, plus whole-forward time."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    model.eval()
    samples: dict[str, list[float]] = defaultdict(list)
    with torch.no_grad():
        for it in range(warmup + iters):
            timer = SectionTimer()
            t0 = time.perf_counter()
            model(images, sparse=sparse, timer=timer)
            total = time.perf_counter() - t0
            if it < warmup:
                continue
            for name in SECTIONS:
                samples[name].append(1e3 * timer.totals.get(name, 0.0))
            samples["total"].append(1e3 * total)

    def summary(v: list[float]) -> dict:
        return {"mean_ms": statistics.fmean(v), "std_ms": statistics.stdev(v) if len(v) > 1 else 0.0}

    res = {name: summary(samples[name]) for name in (*SECTIONS, "total")}
    res["batch"] = int(images.shape[0])
    res["iters"] = iters
    res["images_per_s"] = 1e3 * images.shape[0] / res["total"]["mean_ms"]
    return res
