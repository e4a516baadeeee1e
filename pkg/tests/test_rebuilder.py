import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mfm.rebuilder import (Rebuilder, RebuilderConfig, fuse, rebuild_multi, rebuild_single, resize_mask,
                           sample_mask, sincos_pos_embed)
from mfm.segmodel import SegModelMulti, SegModelSingle


def small_cfg(**kw):
    base = dict(embed_dim=16, grid=4, num_blocks=1, num_heads=2, mask_ratio=0.4)
    base.update(kw)
    return RebuilderConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="mask_ratio"):
        RebuilderConfig(mask_ratio=1.5)
    with pytest.raises(ValueError, match="divisible"):
        RebuilderConfig(embed_dim=30, num_heads=4)
    paper = RebuilderConfig.paper()
    assert (paper.embed_dim, paper.grid, paper.num_blocks, paper.mask_ratio) == (512, 16, 2, 0.4)
    assert RebuilderConfig().num_tokens == 64


def test_embed_identity():
    cfg = small_cfg(embed_dim=8, grid=4, num_heads=2)
    rb = Rebuilder(cfg, (8, 4, 4))
    with torch.no_grad():
        rb.embed.weight.copy_(torch.eye(8))
        rb.embed.bias.zero_()
    ft = torch.randn(2, 8, 4, 4)
    assert torch.equal(rb.embed_features(ft), ft)


def test_embed_shape():
    rb = Rebuilder(RebuilderConfig(embed_dim=32, grid=16, num_heads=4), (64, 8, 8))
    assert rb.embed_features(torch.randn(1, 64, 8, 8)).shape == (1, 32, 16, 16)


def test_embed_constant_plane():
    rb = Rebuilder(small_cfg(grid=8), (4, 3, 3))
    ft = torch.ones(1, 4, 3, 3) * torch.arange(1.0, 5.0).view(1, 4, 1, 1)
    out = rb.embed_features(ft)
    assert torch.allclose(out, out[..., :1, :1].expand_as(out), atol=1e-6)


@pytest.mark.parametrize("ratio,ones", [(0.0, 0), (1.0, 256), (0.4, 102)])
def test_mask_cardinality(ratio, ones):
    cfg = RebuilderConfig(grid=16, mask_ratio=ratio, embed_dim=16, num_heads=1)
    m = sample_mask(cfg, np.random.default_rng(0))
    assert m.shape == (16, 16) and int(m.sum()) == ones
    assert set(m.unique().tolist()) <= {0.0, 1.0}


def test_mask_deterministic_per_seed():
    cfg = small_cfg()
    a = sample_mask(cfg, np.random.default_rng(5))
    b = sample_mask(cfg, np.random.default_rng(5))
    assert torch.equal(a, b)


def test_resize_mask_examples():
    m = (torch.rand(16, 16) > 0.5).float()
    assert torch.equal(resize_mask(m, (16, 16)), m)
    m = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    out = resize_mask(m, (4, 4))
    expected = torch.zeros(4, 4)
    expected[:2, :2] = 1
    assert torch.equal(out, expected)
    m2 = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    # each cell expands to a 2×2 block: 2 cells × 4 pixels
    assert int(resize_mask(m2, (4, 4)).sum()) == 8


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 8), w=st.integers(1, 8), k=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_resize_mask_blocks(h, w, k, seed):
    m = (torch.rand(h, w, generator=torch.Generator().manual_seed(seed)) > 0.5).float()
    out = resize_mask(m, (h * k, w * k))
    assert set(out.unique().tolist()) <= {0.0, 1.0}
    assert int(out.sum()) == int(m.sum()) * k * k
    assert torch.equal(out, m.repeat_interleave(k, 0).repeat_interleave(k, 1))


def test_fuse_hand_case():
    ft = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]]])
    fo = -ft
    ms = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    out = fuse(ft, fo, ms)
    expected = torch.tensor([[[[-1.0, 2.0], [3.0, -4.0]], [[-5.0, 6.0], [7.0, -8.0]]]])
    assert torch.equal(out, expected)


def test_fuse_extremes_bitwise():
    ft, fo = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    assert fuse(ft, fo, torch.zeros(4, 4)).numpy().tobytes() == ft.numpy().tobytes()
    assert fuse(ft, fo, torch.ones(4, 4)).numpy().tobytes() == fo.numpy().tobytes()


def test_fuse_shape_errors():
    with pytest.raises(ValueError):
        fuse(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 4), torch.zeros(4, 4))
    with pytest.raises(ValueError):
        fuse(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 4), torch.zeros(3, 4))


def test_positional_rows_distinct():
    for dim, grid in [(16, 4), (128, 8), (512, 16)]:
        pos = sincos_pos_embed(dim, grid).double()
        d = torch.cdist(pos, pos)
        d.fill_diagonal_(float("inf"))
        assert d.min() > 1e-3


@pytest.mark.parametrize("width,size", [(32, 64), (16, 32), (8, 128), (24, 96)])
def test_single_projector_shape(width, size):
    m = SegModelSingle(width=width)
    shape = m.feature_shape((size, size))
    rb = Rebuilder(small_cfg(grid=8), shape)
    ft = m.encode(torch.randn(1, 3, size, size))
    mask = rb.sample_masks(1, np.random.default_rng(0))
    assert rebuild_single(ft, rb, mask).shape == ft.shape
    assert rb.reconstruct(ft, rng=np.random.default_rng(0)).shape == ft.shape


def test_single_projector_depth_follows_grid():
    # 16 grid to 64 features: stride-1 layer then two stride-2 layers
    rb = Rebuilder(RebuilderConfig(embed_dim=16, grid=16, num_heads=2), (8, 64, 64))
    strides = [layer.stride for layer in rb.chain.layers]
    assert strides == [1, 2, 2]


def test_shape_drift_rejected():
    rb = Rebuilder(small_cfg(), (8, 4, 4))
    with pytest.raises(ValueError, match="built for feature shapes"):
        rb.reconstruct(torch.randn(1, 8, 8, 8), rng=np.random.default_rng(0))


def test_empty_mask_independent_of_token():
    torch.manual_seed(0)
    rb = Rebuilder(small_cfg(mask_ratio=0.0), (8, 4, 4))
    ft = torch.randn(1, 8, 4, 4)
    mask = torch.zeros(1, 4, 4)
    a = rebuild_single(ft, rb, mask)
    with torch.no_grad():
        rb.mask_token.add_(5.0)
    b = rebuild_single(ft, rb, mask)
    assert torch.equal(a, b)


def test_mask_support_changes_offsets():
    torch.manual_seed(0)
    rb = Rebuilder(small_cfg(), (8, 4, 4))
    ft = torch.randn(1, 8, 4, 4)
    m1 = torch.zeros(1, 4, 4)
    m2 = torch.zeros(1, 4, 4)
    m1[0, 0, :2] = 1
    m2[0, 3, 2:] = 1
    assert m1.sum() == m2.sum()
    assert not torch.allclose(rebuild_single(ft, rb, m1), rebuild_single(ft, rb, m2))


def test_multi_offsets_match_pyramid():
    torch.manual_seed(0)
    m = SegModelMulti()
    feats = m.encode(torch.randn(2, 3, 64, 64))
    rb = Rebuilder(small_cfg(projector="multi", grid=8), m.feature_shape((64, 64)))
    mask = rb.sample_masks(2, np.random.default_rng(0))
    offsets = rebuild_multi(feats[-1], rb, mask)
    assert [tuple(o.shape) for o in offsets] == [tuple(f.shape) for f in feats]
    fused = rb.reconstruct(feats, mask=mask)
    assert [tuple(f.shape[-2:]) for f in fused] == [(16, 16), (8, 8), (4, 4), (2, 2)]


def test_multi_stage4_equals_single_first_tap():
    torch.manual_seed(0)
    m = SegModelMulti()
    shapes = m.feature_shape((64, 64))
    multi = Rebuilder(small_cfg(projector="multi", grid=2), shapes)
    # single-scale rebuilder on the stage-4 grid: the chain is just the stride-1 layer
    single = Rebuilder(small_cfg(projector="single", grid=2), shapes[-1])
    assert len(single.chain.layers) == 1
    single.embed.load_state_dict(multi.embed.state_dict())
    single.blocks.load_state_dict(multi.blocks.state_dict())
    single.norm.load_state_dict(multi.norm.state_dict())
    single.chain.layers[0].load_state_dict(multi.chain.layers[0].state_dict())
    single.heads[0].load_state_dict(multi.heads[0].state_dict())
    with torch.no_grad():
        single.mask_token.copy_(multi.mask_token)
    f4 = m.encode(torch.randn(1, 3, 64, 64))[-1]
    mask = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]])
    assert torch.equal(rebuild_multi(f4, multi, mask)[-1], rebuild_single(f4, single, mask))


def test_multi_gradient_reaches_token_from_every_stage():
    torch.manual_seed(0)
    m = SegModelMulti()
    feats = m.encode(torch.randn(1, 3, 64, 64))
    rb = Rebuilder(small_cfg(projector="multi", grid=8, mask_ratio=0.5), m.feature_shape((64, 64)))
    mask = rb.sample_masks(1, np.random.default_rng(0))
    for i in range(4):
        rb.zero_grad()
        offsets = rebuild_multi(feats[-1].detach(), rb, mask)
        offsets[i].square().mean().backward()
        assert rb.mask_token.grad is not None and rb.mask_token.grad.abs().sum() > 0, i


def test_reconstruct_zero_ratio_is_identity():
    m = SegModelMulti()
    feats = m.encode(torch.randn(1, 3, 64, 64))
    rb = Rebuilder(small_cfg(projector="multi", mask_ratio=0.0), m.feature_shape((64, 64)))
    out = rb.reconstruct(feats, rng=np.random.default_rng(0))
    for a, b in zip(out, feats):
        assert torch.equal(a, b)


def test_parameter_count_reported():
    rb = Rebuilder(small_cfg(), (8, 4, 4))
    assert rb.num_parameters() == sum(p.numel() for p in rb.parameters()) > 0


def test_learned_positions_option():
    rb = Rebuilder(small_cfg(pos_embed="learned"), (8, 4, 4))
    assert isinstance(rb.pos_embed, torch.nn.Parameter)
