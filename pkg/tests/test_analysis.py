import json

import numpy as np
import pytest
import torch

from hgvt.analysis import (
    SECTIONS, assign_classes_to_experts, bench, dump_document, expert_histograms, export_graph_slices,
)
from hgvt.model import HgVT


@pytest.mark.parametrize("row,want", [
    ([54, 28, 12, 6], [0, 1]),
    ([46, 24, 22, 8], [0, 1, 2]),
    ([90, 5, 5, 0], [0]),
    ([25, 25, 25, 25], [0, 1, 2, 3]),
])
def test_expert_assignment_examples(row, want):
    (got,) = assign_classes_to_experts([row])
    assert [e for e, _ in got] == want
    assert got[0][1] == pytest.approx(max(row) / sum(row))


def test_expert_assignment_permutation_follows_columns():
    (got,) = assign_classes_to_experts([[6, 12, 54, 28]])
    assert [e for e, _ in got] == [2, 3]


def test_expert_assignment_rejects_bad_histograms():
    with pytest.raises(ValueError):
        assign_classes_to_experts([[0, 0]])
    with pytest.raises(ValueError):
        assign_classes_to_experts([[1, -1]])
    with pytest.raises(ValueError):
        assign_classes_to_experts([])


def image(cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(cfg.in_channels, cfg.image_size, cfg.image_size, generator=g, dtype=torch.float64)


def test_export_structure(nano):
    model = HgVT(nano, seed=0)
    doc = export_graph_slices(model, image(nano), h=3, threshold=0.1)
    dims = nano.dims
    assert 0 <= doc["root_expert"] < dims.n_virtual_edges
    assert doc["grid_side"] ** 2 == dims.n_image_vertices
    assert len(doc["direct"]) <= 3
    contribs = [d["contribution"] for d in doc["direct"]]
    assert all(c > 0.1 for c in contribs) and contribs == sorted(contribs, reverse=True)
    seen = {}
    for d in doc["direct"]:
        assert len(d["pedges"]) <= 3
        for p in d["pedges"]:
            assert len(p["intensity"]) == dims.n_image_vertices
            assert all(0.0 <= a <= 1.0 for a in p["intensity"])
            seen.setdefault(p["pedge"], set()).add(p["duplicate_marker"])
    for e, markers in seen.items():
        assert len(markers) == 1
    shared = [e for e in seen if sum(e in [p["pedge"] for p in d["pedges"]] for d in doc["direct"]) > 1]
    assert sorted(next(iter(seen[e])) for e in shared) == list(range(1, len(shared) + 1))
    direct_ids = {d["vnode"] for d in doc["direct"]}
    assert all(i["vnode"] not in direct_ids and i["via_pedges"] for i in doc["indirect"])


def test_export_uniform_contributions_respect_threshold(nano):
    model = HgVT(nano, seed=0)
    with torch.no_grad():
        # identical virtual vertices give every one the same root membership
        model.virtual_vertices.copy_(model.virtual_vertices[:1].expand_as(model.virtual_vertices))
        iv = nano.dims.n_image_vertices
        model.vertex_adj[iv:] = model.vertex_adj[iv : iv + 1].clone()
    n_vv = nano.dims.n_virtual_vertices
    doc = export_graph_slices(model, image(nano), h=n_vv, threshold=0.0)
    # equal up to rounding inside the blocks, so only the set of vertices is fixed
    assert sorted(d["vnode"] for d in doc["direct"]) == list(range(n_vv))
    assert [d["contribution"] for d in doc["direct"]] == pytest.approx([1 / n_vv] * n_vv)
    doc = export_graph_slices(model, image(nano), h=n_vv, threshold=1 / n_vv + 1e-6)
    assert doc["direct"] == []


def test_export_json_is_byte_stable(nano, tmp_path):
    model = HgVT(nano, seed=0)
    text = dump_document(export_graph_slices(model, image(nano, 3)))
    (tmp_path / "g.json").write_text(text)
    again = dump_document(json.loads((tmp_path / "g.json").read_text()))
    assert again == text
    assert text == dump_document(export_graph_slices(model, image(nano, 3)))


def test_export_requires_expert_pooling(nano):
    model = HgVT(nano.replace(pooling="average"), seed=0)
    with pytest.raises(ValueError):
        export_graph_slices(model, image(nano))


def test_expert_histograms_count_every_image(nano):
    model = HgVT(nano, seed=0)
    imgs = torch.stack([image(nano, s) for s in range(5)])
    hist = expert_histograms(model, imgs, torch.tensor([0, 1, 0, 2, 1]), batch_size=2)
    assert hist.shape == (nano.num_classes, nano.dims.n_virtual_edges)
    assert hist.sum() == 5 and hist[0].sum() == 2


def test_bench_single_iteration(nano):
    model = HgVT(nano, seed=0)
    res = bench(model, torch.stack([image(nano, 0), image(nano, 1)]), iters=1, warmup=0)
    assert all(res[s]["std_ms"] == 0.0 for s in (*SECTIONS, "total"))
    assert sum(res[s]["mean_ms"] for s in SECTIONS) <= res["total"]["mean_ms"]
    assert res["batch"] == 2 and res["images_per_s"] > 0
    with pytest.raises(ValueError):
        bench(model, torch.stack([image(nano)]), iters=0)
