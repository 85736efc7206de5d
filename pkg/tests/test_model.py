import numpy as np
import pytest
import torch

from hgvt import core
from hgvt.checkpoint import CheckpointError, load_model, read_checkpoint, save_checkpoint
from hgvt.config import GraphDims, ModelConfig, preset
from hgvt.model import (
    ExpertGate, HgVT, PatchEmbed, count_flops, count_params, expert_pool, forward_classify, image_pool,
    sincos_position_embedding, stem_channels,
)
from hgvt.training import total_loss

from .helpers import rand


def images(gen, cfg, b=2):
    return rand(gen, b, cfg.in_channels, cfg.image_size, cfg.image_size)


def test_lt_vertex_count_from_resolution():
    cfg = preset("lt")
    assert cfg.dims.n_image_vertices == (160 // 16) ** 2 == 100
    with pytest.raises(ValueError):
        cfg.replace(image_size=176)


def test_zero_image_gives_position_embeddings_only(nano):
    pe = PatchEmbed(nano).double()
    torch.nn.init.zeros_(pe.proj.bias)
    out = pe(torch.zeros(1, 3, 16, 16, dtype=torch.float64))
    torch.testing.assert_close(out[0], sincos_position_embedding(4, 16), rtol=0, atol=0)


def test_indivisible_resolution_rejected(nano):
    pe = PatchEmbed(nano).double()
    with pytest.raises(ValueError):
        pe(torch.zeros(1, 3, 18, 16, dtype=torch.float64))


def test_patch_projection_permutation_equivariance(nano, gen):
    pe = PatchEmbed(nano).double()
    pe.pos.zero_()
    x = images(gen, nano, 1)
    y = x.clone()
    # swap patch (0,0) with patch (2,3)
    y[..., 0:4, 0:4], y[..., 8:12, 12:16] = x[..., 8:12, 12:16], x[..., 0:4, 0:4]
    a, b = pe(x)[0], pe(y)[0]
    torch.testing.assert_close(b[0], a[11])
    torch.testing.assert_close(b[11], a[0])
    torch.testing.assert_close(b[1:11], a[1:11])


def test_conv_stem_stage_counts():
    assert len(stem_channels(preset("mu"))) == 2
    assert len(stem_channels(preset("ti"))) == 4
    assert stem_channels(preset("ti")) == [16, 32, 64, 128]


def test_init_state_shapes_and_input_independent_edges(nano, gen):
    m = HgVT(nano)
    st = m.init_state(images(gen, nano))
    st.check(nano.dims)
    assert st.xv.shape == (2, 19, 16) and st.xe.shape == (2, 6, 16)
    torch.testing.assert_close(st.xe[0], st.xe[1], rtol=0, atol=0)


def test_gradient_reaches_virtual_embeddings(nano, gen):
    m = HgVT(nano).train()
    out = m(images(gen, nano, 4), generator=torch.Generator().manual_seed(0))
    total_loss(out, torch.tensor([0, 1, 2, 3]), nano)[0].backward()
    assert m.virtual_vertices.grad.abs().sum() > 0
    # every virtual-hyperedge embedding receives gradient under weighted-average routing
    pe = nano.dims.n_primary_edges
    assert torch.all(m.edges.grad[pe:].abs().sum(-1) > 0)


def test_expert_pool_uniform_and_topk(gen):
    gate = ExpertGate(6, 4).double()
    x = rand(gen, 4, 6)
    pooled, probs, _ = expert_pool(x, gate, training=True, noise_sigma=0.0, dropout=0.0)
    np.testing.assert_allclose(probs.detach().numpy(), 0.25)
    torch.testing.assert_close(pooled, x.mean(0))
    torch.nn.init.normal_(gate.weight)
    pooled, probs, _ = expert_pool(x, gate, training=False, top_k=1)
    torch.testing.assert_close(pooled, x[int(probs.argmax())], rtol=0, atol=0)
    with pytest.raises(ValueError):
        expert_pool(x, gate, training=False, top_k=5)


def test_expert_pool_train_infer_consistency(gen):
    gate = ExpertGate(6, 3).double()
    torch.nn.init.normal_(gate.weight)
    x = rand(gen, 5, 3, 6)
    a, _, _ = expert_pool(x, gate, training=True, noise_sigma=0.0, dropout=0.0)
    b, _, _ = expert_pool(x, gate, training=False, top_k=3)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_expert_dropout_keeps_one_expert(gen):
    gate = ExpertGate(6, 3).double()
    x = rand(gen, 200, 3, 6)
    pooled, probs, _ = expert_pool(x, gate, training=True, dropout=0.9, generator=gen)
    np.testing.assert_allclose(probs.sum(-1).detach().numpy(), 1.0)
    assert torch.isfinite(pooled).all()
    assert (probs == 0).any()


def test_image_pool():
    row = torch.tensor([[1.0, 2.0]])
    torch.testing.assert_close(image_pool(row), row[0])
    torch.testing.assert_close(image_pool(torch.full((5, 3), 7.0)), torch.full((3,), 7.0))
    x = torch.randn(6, 3, dtype=torch.float64)
    torch.testing.assert_close(image_pool(x), image_pool(x[torch.randperm(6)]))
    with pytest.raises(ValueError):
        image_pool(torch.zeros(0, 3))


@pytest.mark.parametrize("pooling,width", [("average", 16), ("image", 16), ("expert", 16), ("expert_image", 32)])
def test_pooled_width_contract(nano, gen, pooling, width):
    cfg = nano.replace(pooling=pooling)
    out = forward_classify(HgVT(cfg), images(gen, cfg), "infer")
    assert out.pooled.shape == (2, width) == (2, cfg.pooled_width)
    assert out.logits.shape == (2, cfg.num_classes)
    assert torch.isfinite(out.logits).all()


def test_drop_image_at_head(nano, gen):
    cfg = nano.replace(drop_image_at_head=True)
    m = HgVT(cfg)
    assert m.head.in_features == 16
    out = forward_classify(m, images(gen, cfg), "infer")
    assert out.pooled.shape[-1] == 32  # image half still produced for retrieval
    torch.testing.assert_close(out.logits, m.head(out.extras["expert_pooled"]))


def test_single_image_unbatched(nano, gen):
    out = forward_classify(HgVT(nano), images(gen, nano, 1)[0], "infer")
    assert out.logits.shape == (nano.num_classes,)
    assert out.adjacencies[0].soft.shape == (19, 6)


def test_zero_depth_pipeline(nano, gen):
    cfg = nano.replace(depth=0)
    m = HgVT(cfg)
    out = forward_classify(m, images(gen, cfg), "infer")
    assert out.adjacencies == [] and out.logits.shape == (2, 4)
    assert count_params(cfg) == sum(p.numel() for p in m.parameters())


def test_forward_determinism_with_fixed_noise_seed(nano, gen):
    m = HgVT(nano).eval()
    x = images(gen, nano)
    a = forward_classify(m, x, "train", generator=torch.Generator().manual_seed(5))
    b = forward_classify(m, x, "train", generator=torch.Generator().manual_seed(5))
    torch.testing.assert_close(a.logits, b.logits, rtol=0, atol=0)
    assert not m.training  # caller's mode restored


@pytest.mark.parametrize("name", ["nano", "mu", "lt", "ti", "s"])
def test_count_params_matches_instantiated_model(name):
    cfg = preset(name)
    assert count_params(cfg) == sum(p.numel() for p in HgVT(cfg).parameters())


@pytest.mark.parametrize("variant", [
    dict(joint_ffn=False), dict(tied_adjacency=True), dict(tied_attention=True), dict(pooling="average"),
    dict(ffn_bias=False), dict(stem="conv_stem"), dict(drop_image_at_head=True),
])
def test_count_params_variants(nano, variant):
    cfg = nano.replace(**variant)
    assert count_params(cfg) == sum(p.numel() for p in HgVT(cfg).parameters())


def test_flops_linear_in_depth():
    base = preset("ti")
    f = [count_flops(base.replace(depth=d)) for d in (0, 1, 2, 6)]
    per = f[1] - f[0]
    assert f[2] - f[0] == 2 * per and f[3] - f[0] == 6 * per
    assert count_flops(base, flops_per_mac=2) == 2 * count_flops(base)


def test_checkpoint_round_trip(nano, gen, tmp_path):
    cfg = nano.replace(stem="conv_stem")
    m = HgVT(cfg, seed=3)
    path = tmp_path / "m.hgvt"
    save_checkpoint(path, m, cfg, {"note": 1})
    assert path.read_bytes()[:4] == b"HGVT"
    cfg2, tensors, extra = read_checkpoint(path)
    assert cfg2 == cfg and extra == {"note": 1}
    m2 = load_model(path)
    for (k, a), (k2, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert k == k2
        torch.testing.assert_close(a, b, rtol=0, atol=0)
    x = images(gen, cfg)
    torch.testing.assert_close(forward_classify(m, x).logits, forward_classify(m2, x).logits, rtol=0, atol=0)


def test_checkpoint_rejects_corruption(nano, tmp_path):
    path = tmp_path / "m.hgvt"
    save_checkpoint(path, HgVT(nano), nano)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dims=GraphDims(16, 3, 4, 2), d_f=15, d_a=8, depth=1, heads=2, patch_size=4, image_size=16)
    with pytest.raises(ValueError):
        preset("nano").replace(expert_top_k=3)
    with pytest.raises(ValueError):
        preset("nope")
    assert preset("nano").population_max == pytest.approx(19 / 6)
    assert preset("ti").population_max == 36.04


def test_shape_error_on_wrong_image_layout(nano):
    with pytest.raises(core.ShapeError):
        HgVT(nano).init_state(torch.zeros(3, 16, 16, dtype=torch.float64))
