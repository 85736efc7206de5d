"""``hgvt`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_model
from .config import ModelConfig, RunConfig, TrainConfig, preset


def _model_config(name_or_path: str) -> ModelConfig:
    path = Path(name_or_path)
    if path.is_file():
        return RunConfig.load(path).model
    return preset(name_or_path)


def _dataset(directory: str):
    from .training import SyntheticDataset

    return SyntheticDataset.load(directory)


def _indices(n_total: int, limit: int | None) -> range:
    return range(n_total if limit is None else min(limit, n_total))


# -- commands --------------------------------------------------------------


def cmd_make_data(a) -> dict:
    from .training import SyntheticDataset

    ds = SyntheticDataset(a.n, a.classes, a.image_size, a.channels, a.seed or 0)
    ds.save(a.out)
    return {"out": str(a.out), "n": a.n, "classes": a.classes, "image_size": a.image_size}


def cmd_train(a) -> dict:
    from .training import SyntheticDataset, train

    run = RunConfig.load(a.config)
    tc = run.train
    if a.seed is not None:
        tc = TrainConfig.from_dict({**tc.to_dict(), "seed": a.seed})
    if a.steps is not None:
        tc = TrainConfig.from_dict({**tc.to_dict(), "steps": a.steps})
    if a.data:
        ds = _dataset(a.data)
    else:
        d = run.data
        ds = SyntheticDataset(d.get("n", 256), d.get("num_classes", run.model.num_classes),
                              d.get("image_size", run.model.image_size), run.model.in_channels, d.get("seed", 0))
    res = train(ds, run.model, tc, a.out)
    last = res.log[-1] if res.log else {}
    return {"steps": res.steps, "checkpoint": str(Path(a.out) / "model.hgvt"),
            "log": str(Path(a.out) / "metrics.ndjson"), "final": last}


def cmd_eval_graph(a) -> dict:
    from .training import evaluate

    model = load_model(a.checkpoint)
    ds = _dataset(a.data)
    res = evaluate(model, ds, _indices(len(ds), a.limit), scope=a.scope)
    if a.out:
        Path(a.out).write_text(json.dumps(res, indent=2, sort_keys=True))
    return res


def cmd_embed(a) -> dict:
    from .retrieval import EmbeddingDB, embed_batch

    model = load_model(a.checkpoint)
    ds = _dataset(a.data)
    idx = list(_indices(len(ds), a.limit))
    records = []
    for i in range(0, len(idx), 32):
        chunk = idx[i : i + 32]
        x, y = ds.batch(chunk)
        records += embed_batch(model, x, chunk, y.tolist(), a.m, a.n)
    db = EmbeddingDB(records)
    db.save(a.out)
    return {"out": str(a.out), **db.header()}


def cmd_retrieve(a) -> dict:
    from .retrieval import CentroidHasher, EmbeddingDB, evaluate_retrieval
    from .retrieval.evaluation import load_reference, search

    db = EmbeddingDB.load(a.db)
    queries = EmbeddingDB.load(a.queries).records if a.queries else db.records
    hasher = CentroidHasher.load(a.hasher) if a.hasher else None
    if a.method in ("aps", "avs") and hasher is None:
        raise ValueError(f"--method {a.method} needs --hasher")
    ref = load_reference(a.reference) if a.reference else None
    res = evaluate_retrieval(db, queries, [a.method], a.k, order=a.order, hasher=hasher, r=a.r, c=a.c,
                             reference=ref)[a.method]
    rankings = {q.id: search(a.method, q, db, a.k, order=a.order, hasher=hasher, r=a.r, c=a.c,
                             exclude=q.id if q.id in db else None) for q in queries[: a.show]}
    return {"method": a.method, "order": a.order, **res, "rankings": {str(k): v for k, v in rankings.items()}}


def cmd_train_centroids(a) -> dict:
    from .retrieval import EmbeddingDB, bin_diversity, train_centroids

    db = EmbeddingDB.load(a.db)
    feats = np.concatenate([r.edges for r in db.records])
    hasher = train_centroids(feats, a.bins, a.lr, batch=a.batch, epochs=a.epochs, seed=a.seed or 0)
    hasher.save(a.out)
    return {"out": str(a.out), "bins": a.bins, "features": int(feats.shape[0]),
            "bin_diversity": bin_diversity(hasher, feats)}


def cmd_rerank_eval(a) -> dict:
    from .retrieval import CentroidHasher, EmbeddingDB, adaptive_rerank, evaluate_retrieval
    from .retrieval.evaluation import search

    db = EmbeddingDB.load(a.db)
    hasher = CentroidHasher.load(a.hasher)
    res = evaluate_retrieval(db, db.records, ["ps", "vs", "aps", "avs"], a.k, order=a.order, hasher=hasher,
                             r=a.r, c=a.c)
    lookups, comps = [], []
    for q in db.records:
        shortlist = [i for i in search("ps", q, db, a.r + 1) if i != q.id][: a.r]
        rr = adaptive_rerank(q, shortlist, db, hasher, min(a.c, q.edges.shape[0]))
        lookups.append(rr.lookups)
        comps.append(rr.comparisons)
    res["counters"] = {"max_lookups": max(lookups), "max_comparisons": max(comps),
                       "mean_comparisons": float(np.mean(comps)), "bound_R_C": a.r * a.c}
    return res


def cmd_export_graph(a) -> dict:
    from .analysis import dump_document, export_graph_slices

    model = load_model(a.checkpoint)
    x, _ = _dataset(a.data).batch([a.index])
    doc = export_graph_slices(model, x[0], a.h, a.threshold)
    if a.out:
        Path(a.out).write_text(dump_document(doc))
    return doc


def cmd_assign_experts(a) -> dict:
    from .analysis import assign_classes_to_experts, expert_histograms

    if a.histogram:
        hist = np.asarray(json.loads(Path(a.histogram).read_text()), dtype=np.float64)
    else:
        if not (a.checkpoint and a.data):
            raise ValueError("give --histogram, or --checkpoint with --data")
        model = load_model(a.checkpoint)
        ds = _dataset(a.data)
        x, y = ds.batch(_indices(len(ds), a.limit))
        hist = expert_histograms(model, x, y)
        hist = hist[hist.sum(axis=1) > 0]
    groups = assign_classes_to_experts(hist, a.coverage)
    return {"assignments": [[{"expert": e, "prob": p} for e, p in g] for g in groups]}


def cmd_bench(a) -> dict:
    from .analysis import bench

    model = load_model(a.checkpoint) if a.checkpoint else _bench_model(a.config)
    cfg = model.cfg
    gen = torch.Generator().manual_seed(a.seed or 0)
    x = torch.randn(a.batch, cfg.in_channels, cfg.image_size, cfg.image_size, generator=gen, dtype=torch.float64)
    return bench(model, x, a.iters, a.warmup, sparse=a.sparse)


def _bench_model(name_or_path: str | None):
    from .model import HgVT

    if not name_or_path:
        raise ValueError("give --checkpoint or --config")
    return HgVT(_model_config(name_or_path))


def cmd_gradcheck(a) -> dict:
    from .gradcheck import run_all

    reports = run_all(_model_config(a.config), a.seed or 0, a.step, a.tol)
    rows = {k: {"max_rel_err": r.max_rel_err, "passed": r.passed, "coords": r.n_checked} for k, r in reports.items()}
    return {"tol": a.tol, "step": a.step, "checks": rows, "all_passed": all(r.passed for r in reports.values())}


def cmd_count(a) -> dict:
    from .model import count_flops, count_params

    cfg = _model_config(a.config)
    res = a.resolution or cfg.image_size
    return {"params": count_params(cfg), "macs": count_flops(cfg, res),
            "flops": count_flops(cfg, res, flops_per_mac=2), "resolution": res}


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hgvt", description="Hypergraph vision transformer toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print machine-readable JSON")
    common.add_argument("--seed", type=int, default=None)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("make-data", cmd_make_data, "write a synthetic dataset descriptor")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--image-size", type=int, default=16)
    sp.add_argument("--channels", type=int, default=3)

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data")
    sp.add_argument("--steps", type=int)

    sp = add("eval-graph", cmd_eval_graph, "accuracy and hypergraph quality metrics")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--scope", choices=("iV", "allV"), default="iV")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out")

    sp = add("embed", cmd_embed, "build a retrieval database")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--m", type=int, default=3)
    sp.add_argument("--n", type=int, default=4)

    sp = add("retrieve", cmd_retrieve, "search a database and score it")
    sp.add_argument("--db", required=True)
    sp.add_argument("--queries")
    sp.add_argument("--method", choices=("ps", "vs", "aps", "avs"), default="ps")
    sp.add_argument("--order", choices=("0", "1", "2", "full", "pointwise"), default="0")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--hasher")
    sp.add_argument("--reference", help="JSON mapping query id to designated top-1 id")
    sp.add_argument("--r", type=int, default=100)
    sp.add_argument("--c", type=int, default=4)
    sp.add_argument("--show", type=int, default=5, help="queries whose rankings are printed")

    sp = add("train-centroids", cmd_train_centroids, "learn hyperedge hash bins")
    sp.add_argument("--db", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bins", type=int, default=10)
    sp.add_argument("--epochs", type=int, default=8)
    sp.add_argument("--lr", type=float, default=4e-3)
    sp.add_argument("--batch", type=int, default=512)

    sp = add("rerank-eval", cmd_rerank_eval, "compare PS/VS with their reranked variants")
    sp.add_argument("--db", required=True)
    sp.add_argument("--hasher", required=True)
    sp.add_argument("--order", choices=("0", "1", "2", "full", "pointwise"), default="0")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--r", type=int, default=100)
    sp.add_argument("--c", type=int, default=4)

    sp = add("export-graph", cmd_export_graph, "export hypergraph slices for one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--h", type=int, default=5)
    sp.add_argument("--threshold", type=float, default=0.1)
    sp.add_argument("--out")

    sp = add("assign-experts", cmd_assign_experts, "group classes under experts")
    sp.add_argument("--histogram", help="JSON class x expert matrix")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--coverage", type=float, default=0.80)

    sp = add("bench", cmd_bench, "per-component forward timing")
    sp.add_argument("--checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--iters", type=int, default=100)
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--sparse", action="store_true")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss")
    sp.add_argument("--config", default="nano")
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)

    sp = add("count", cmd_count, "analytic parameter and FLOP counts")
    sp.add_argument("--config", required=True)
    sp.add_argument("--resolution", type=int)
    return p


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _render(result: dict, indent: str = "") -> list[str]:
    lines = []
    for k, v in result.items():
        if isinstance(v, dict):
            lines.append(f"{indent}{k}:")
            lines += _render(v, indent + "  ")
        elif isinstance(v, float):
            lines.append(f"{indent}{k}: {v:.6g}" if math.isfinite(v) else f"{indent}{k}: {v}")
        else:
            lines.append(f"{indent}{k}: {v}")
    return lines


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(1)
    try:
        result = args.fn(args)
    except (ValueError, FileNotFoundError, CheckpointError, KeyError) as exc:
        print(f"hgvt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(result, default=_default, sort_keys=True))
    else:
        print("\n".join(_render(result)))
    if args.command == "gradcheck" and not result["all_passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
