"""Masked feature reconstruction head (train-time only).

Pipeline: channel embedding + bilinear resize to a fixed token grid, uniform
random masking with one shared learnable token, absolute positional
embedding, pre-norm transformer blocks, a transposed-convolution projector,
and mask-selective fusion with the original encoder features.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .layers import Conv2d, ConvTranspose2d, LayerNorm, Linear


@dataclass
class RebuilderConfig:
    embed_dim: int = 128
    grid: int = 8
    num_blocks: int = 2
    num_heads: int = 4
    mask_ratio: float = 0.4
    projector: str = "single"  # single | multi
    mlp_ratio: int = 4
    pos_embed: str = "sincos"  # sincos | learned

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.projector not in ("single", "multi"):
            raise ValueError(f"unknown projector kind {self.projector!r}")
        if self.pos_embed not in ("sincos", "learned"):
            raise ValueError(f"unknown positional embedding {self.pos_embed!r}")
        if self.pos_embed == "sincos" and self.embed_dim % 4:
            raise ValueError("sincos positional embedding needs embed_dim divisible by 4")
        if self.grid <= 0 or self.num_blocks < 0:
            raise ValueError("grid must be positive and num_blocks non-negative")

    @property
    def num_tokens(self):
        return self.grid * self.grid

    @classmethod
    def paper(cls, **kw):
        """Full-size setting: 512-d tokens on a 16×16 grid, 2 blocks."""
        base = dict(embed_dim=512, grid=16, num_blocks=2, num_heads=8, mask_ratio=0.4)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


def mask_count(ratio, n):
    # round half up; Python's round() would send 0.5 cases to even
    return int(math.floor(ratio * n + 0.5))


def sample_mask(cfg: RebuilderConfig, rng: np.random.Generator):
    """Binary grid×grid mask with exactly round(ratio·grid²) ones."""
    n = cfg.num_tokens
    k = mask_count(cfg.mask_ratio, n)
    flat = np.zeros(n, dtype=np.float32)
    flat[rng.permutation(n)[:k]] = 1.0
    return torch.from_numpy(flat.reshape(cfg.grid, cfg.grid))


def resize_mask(mask, size):
    """Nearest-neighbour resize of an (...)×h×w binary mask; stays binary."""
    h, w = mask.shape[-2:]
    H, W = size
    if (h, w) == (H, W):
        return mask
    rows = (torch.arange(H) * h) // H
    cols = (torch.arange(W) * w) // W
    return mask[..., rows[:, None], cols[None, :]]


def fuse(ft, fo, ms):
    """Keep ``fo`` where the mask is 1 and ``ft`` where it is 0.

    ``ms`` is H×W or N×H×W and broadcasts across channels. Selection is
    exact: no arithmetic touches the chosen values.
    """
    if ft.shape != fo.shape:
        raise ValueError(f"fuse: feature {tuple(ft.shape)} and offset {tuple(fo.shape)} differ")
    if ms.shape[-2:] != ft.shape[-2:] or ms.dim() not in (2, 3):
        raise ValueError(f"fuse: mask {tuple(ms.shape)} does not match features {tuple(ft.shape)}")
    if ms.dim() == 3 and ms.shape[0] != ft.shape[0]:
        raise ValueError(f"fuse: mask batch {ms.shape[0]} != feature batch {ft.shape[0]}")
    sel = ms.bool().unsqueeze(-3)
    return torch.where(sel, fo, ft)


def sincos_pos_embed(dim, grid):
    """Fixed 2-D sine/cosine table of shape (grid², dim)."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def enc(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([enc(ys), enc(xs)], axis=1)
    return torch.from_numpy(table.astype(np.float32))


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)

    def forward(self, x):
        n, l, d = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(n, l, 3, h, d // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.hadamard(T.matmul(q, k.transpose(-2, -1)), torch.tensor(self.scale, dtype=x.dtype))
        out = T.matmul(T.softmax(scores, dim=-1), v)
        return self.proj(out.transpose(1, 2).reshape(n, l, d))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim, num_heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio)
        self.fc2 = Linear(dim * mlp_ratio, dim)

    def forward(self, x):
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.fc2(T.gelu(self.fc1(self.norm2(x)))))


class TransposedConvChain(nn.Module):
    """A stride-1 transposed conv followed by ``num_up`` stride-2 ones.

    Returns the activation after every layer (the taps), so the single-scale
    projector reads the last tap and the multi-scale projector reads all.
    """

    def __init__(self, dim_in, dim, num_up):
        super().__init__()
        self.layers = nn.ModuleList(
            [ConvTranspose2d(dim_in, dim, stride=1)] + [ConvTranspose2d(dim, dim, stride=2) for _ in range(num_up)]
        )

    def tap_sizes(self, size):
        sizes = []
        for layer in self.layers:
            size = layer.out_size(size)
            sizes.append(size)
        return sizes

    def forward(self, x):
        taps = []
        for i, layer in enumerate(self.layers):
            if i:
                x = T.gelu(x)
            x = layer(x)
            taps.append(x)
        return taps


def _num_up(src, dst):
    return max(0, math.ceil(math.log2(dst / src))) if dst > src else 0


class Rebuilder(nn.Module):
    """Train-time feature reconstructor.

    ``feature_shape`` is (C, H, W) for the single-scale projector or a list
    of four (C_i, H_i, W_i) stage shapes for the multi-scale projector; the
    last stage is the one that gets embedded.
    """

    def __init__(self, cfg: RebuilderConfig, feature_shape, image_size=None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        if cfg.projector == "single":
            if len(feature_shape) != 3 or not isinstance(feature_shape[0], int):
                raise ValueError(f"single-scale projector needs one (C, H, W) shape, got {feature_shape}")
            self.stage_shapes = [tuple(feature_shape)]
        else:
            if len(feature_shape) != 4:
                raise ValueError(f"multi-scale projector needs 4 stage shapes, got {feature_shape}")
            self.stage_shapes = [tuple(s) for s in feature_shape]
        c_in = self.stage_shapes[-1][0]

        self.embed = Linear(c_in, d)
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        pos = sincos_pos_embed(d, cfg.grid) if cfg.pos_embed == "sincos" else None
        if pos is None:
            self.pos_embed = nn.Parameter(torch.randn(cfg.num_tokens, d) * 0.02)
        else:
            self.register_buffer("pos_embed", pos)
        self.blocks = nn.ModuleList([Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_blocks)])
        self.norm = LayerNorm(d)

        width = max(d // 2, 8)
        if cfg.projector == "single":
            c, h, w = self.stage_shapes[0]
            self.chain = TransposedConvChain(d, width, _num_up(cfg.grid, max(h, w)))
            self.heads = nn.ModuleList([Conv2d(width, c, 1)])
        else:
            self.chain = TransposedConvChain(d, width, 3)
            # tap k feeds stage 4-k: last stage first, then ever finer
            self.heads = nn.ModuleList([Conv2d(width, s[0], 1) for s in reversed(self.stage_shapes)])
        self._check_projector()

        # comparator heads, unused by the main objective
        if image_size is None:
            h0 = self.stage_shapes[0][1] * (8 if cfg.projector == "single" else 4)
            image_size = (h0, h0)
        self.patch = max(1, image_size[0] // cfg.grid)
        self.pixel_head = Linear(d, 3 * self.patch * self.patch)
        self.feature_tokens = nn.ParameterList([nn.Parameter(torch.randn(s[0]) * 0.02) for s in self.stage_shapes])

    def _check_projector(self):
        sizes = self.chain.tap_sizes(self.cfg.grid)
        if self.cfg.projector == "single":
            expected = [self.stage_shapes[0][1:]]
            taps = [sizes[-1]]
        else:
            expected = [s[1:] for s in reversed(self.stage_shapes)]
            taps = sizes
        for tap, exp, head in zip(taps, expected, self.heads):
            if exp[0] <= 0 or exp[1] <= 0 or tap <= 0:
                raise ValueError(f"projector tap {tap} cannot be aligned to feature extent {exp}")

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())

    # --- pipeline stages -------------------------------------------------

    def embed_features(self, ft):
        """Channel map to embed_dim, then bilinear resize to the token grid."""
        x = self.embed(ft.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return T.bilinear_resize(x, (self.cfg.grid, self.cfg.grid))

    def transform(self, emb, mask):
        """Swap masked tokens for the mask token, add positions, run the blocks."""
        n, d, g, _ = emb.shape
        tokens = emb.flatten(2).transpose(1, 2)  # N×L×D
        m = mask.reshape(n, g * g, 1).to(tokens.dtype)
        tokens = T.add(T.hadamard(tokens, 1.0 - m), T.hadamard(m, self.mask_token))
        tokens = T.add(tokens, self.pos_embed)
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.norm(tokens)
        return tokens

    def project(self, tokens):
        """Tokens back to feature space: one offset per stage (finest first)."""
        n, l, d = tokens.shape
        g = self.cfg.grid
        grid = tokens.transpose(1, 2).reshape(n, d, g, g)
        taps = self.chain(grid)
        if self.cfg.projector == "single":
            c, h, w = self.stage_shapes[0]
            return [self.heads[0](T.bilinear_resize(taps[-1], (h, w)))]
        offsets = []
        for tap, head, shape in zip(taps, self.heads, reversed(self.stage_shapes)):
            offsets.append(head(T.bilinear_resize(tap, shape[1:])))
        return offsets[::-1]

    def _check_inputs(self, feats):
        got = [tuple(f.shape[1:]) for f in feats]
        if got != self.stage_shapes:
            raise ValueError(f"rebuilder built for feature shapes {self.stage_shapes}, got {got}")

    def sample_masks(self, n, rng):
        return torch.stack([sample_mask(self.cfg, rng) for _ in range(n)])

    def rebuild(self, feats, mask):
        """Offsets f^o for every stage given the batch of grid masks."""
        self._check_inputs(feats)
        tokens = self.transform(self.embed_features(feats[-1]), mask)
        return self.project(tokens)

    def reconstruct(self, features, rng=None, mask=None, return_aux=False):
        """Embed → mask → rebuild → resize mask → fuse.

        ``features`` is a tensor (single) or a list of four tensors (multi);
        the result has the same structure and shapes.
        """
        single = torch.is_tensor(features)
        feats = [features] if single else list(features)
        if mask is None:
            mask = self.sample_masks(feats[0].shape[0], rng)
        offsets = self.rebuild(feats, mask)
        masks_s = [resize_mask(mask, f.shape[-2:]) for f in feats]
        fused = [fuse(f, o, m) for f, o, m in zip(feats, offsets, masks_s)]
        out = fused[0] if single else fused
        if return_aux:
            return out, {"mask": mask, "masks_s": masks_s, "offsets": offsets}
        return out


def rebuild_single(ft, rebuilder, mask):
    if rebuilder.cfg.projector != "single":
        raise ValueError("rebuild_single requires the single-scale projector")
    return rebuilder.rebuild([ft], mask)[0]


def rebuild_multi(ft4, rebuilder, mask):
    if rebuilder.cfg.projector != "multi":
        raise ValueError("rebuild_multi requires the multi-scale projector")
    c, h, w = rebuilder.stage_shapes[-1]
    if tuple(ft4.shape[1:]) != (c, h, w):
        raise ValueError(f"expected stage-4 features {(c, h, w)}, got {tuple(ft4.shape[1:])}")
    tokens = rebuilder.transform(rebuilder.embed_features(ft4), mask)
    return rebuilder.project(tokens)


def reconstruct(features, rebuilder, rng, mask=None):
    return rebuilder.reconstruct(features, rng=rng, mask=mask)
