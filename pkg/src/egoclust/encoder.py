"""Patch tokenization, random masking, and the shared token encoder.

One encoder instance serves both augmented views of every image: views are
stacked along the batch axis and encoded in a single call, so weight
sharing is structural rather than a convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imaging import Image
from .layers import LayerNorm, Linear, TransformerBlock, flatten_params, trunc_normal


@dataclass(frozen=True)
class EncoderConfig:
    """Desk-scale ViT-style encoder geometry.

    ``grid`` is (width, height) in patches; token order is raster order
    over that grid (row by row).
    """

    image_size: tuple = (64, 64)
    patch: int = 8
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    mask_rate: float = 0.75

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must be in [0, 1), got {self.mask_rate}")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")

    @property
    def grid_h(self) -> int:
        return self.image_size[0] // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_size[1] // self.patch

    @property
    def grid(self) -> tuple:
        return (self.grid_w, self.grid_h)

    @property
    def tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch


@dataclass
class MaskSpec:
    """Disjoint masked/visible partition of token indices 0..total-1."""

    total: int
    masked: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        self.masked = np.sort(np.asarray(self.masked, dtype=np.int64))
        self.visible = np.sort(np.asarray(self.visible, dtype=np.int64))
        merged = np.concatenate([self.masked, self.visible])
        if len(merged) != self.total or not np.array_equal(np.sort(merged), np.arange(self.total)):
            raise ValueError("masked and visible must partition 0..total-1")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sample_mask(total: int, rate: float, rng: np.random.Generator) -> MaskSpec:
    """Uniform random mask of round(rate * total) tokens, at least 1 visible."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"mask rate must be in [0, 1), got {rate}")
    n_masked = min(_round_half_up(rate * total), total - 1)
    perm = rng.permutation(total)
    return MaskSpec(total=total, masked=perm[:n_masked], visible=perm[n_masked:])


def no_mask(total: int) -> MaskSpec:
    return MaskSpec(total=total, masked=np.empty(0, dtype=np.int64), visible=np.arange(total))


def patchify(img: Image, patch: int) -> np.ndarray:
    """Cut an image into flattened patches, one row per token.

    Token t covers grid cell (t // grid_w, t % grid_w); within a row the
    P*P*3 patch values are laid out pixel-major (y, x, channel).
    """
    c, h, w = img.data.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    hwc = img.data.transpose(1, 2, 0)
    tiles = hwc.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(gh * gw, patch * patch * c))


def unpatchify(tokens: np.ndarray, patch: int, grid: tuple) -> Image:
    """Inverse of patchify; ``grid`` is (width, height) in patches."""
    gw, gh = grid
    tokens = np.asarray(tokens)
    if tokens.shape != (gh * gw, patch * patch * 3):
        raise ValueError(f"token matrix {tokens.shape} does not match grid {grid}, patch {patch}")
    tiles = tokens.reshape(gh, gw, patch, patch, 3).transpose(0, 2, 1, 3, 4)
    hwc = tiles.reshape(gh * patch, gw * patch, 3)
    return Image(hwc.transpose(2, 0, 1))


def apply_mask(tokens: np.ndarray, mask: MaskSpec) -> np.ndarray:
    """Zero the masked rows, so original minus masked recovers the content."""
    tokens = np.asarray(tokens)
    if tokens.shape[0] != mask.total:
        raise ValueError(f"token count {tokens.shape[0]} does not match mask total {mask.total}")
    out = tokens.copy()
    out[mask.masked] = 0.0
    return out


@dataclass
class EncodedView:
    """Visible-token embeddings for one view, with its mask and grid dims."""

    tokens: Tensor
    mask: MaskSpec
    grid: tuple

    def __post_init__(self):
        if self.tokens.shape[0] != len(self.mask.visible):
            raise ValueError("embedding rows must match visible token count")
        if self.grid[0] * self.grid[1] != self.mask.total:
            raise ValueError("grid does not cover the token count")


class Encoder:
    """Transformer over visible patch tokens with learned position table."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.embed = Linear(config.patch_dim, config.dim, rng, dtype)
        self.pos = Tensor(trunc_normal(rng, (config.tokens, config.dim), dtype=dtype), requires_grad=True)
        self.blocks = [
            TransformerBlock(config.dim, config.heads, config.mlp_ratio, rng, dtype)
            for _ in range(config.depth)
        ]
        self.norm = LayerNorm(config.dim, dtype)

    def params(self) -> dict:
        groups = {"embed": self.embed.params(), "": {"pos": self.pos}, "norm": self.norm.params()}
        for i, blk in enumerate(self.blocks):
            groups[f"blocks.{i}"] = blk.params()
        return flatten_params(groups)

    def forward_visible(self, tokens: Tensor, visible: np.ndarray) -> Tensor:
        """Encode (B, V, patch_dim) tokens whose grid positions are ``visible``."""
        b, v = visible.shape
        if v == 0:
            raise ValueError("cannot encode a view with zero visible tokens")
        if tokens.shape[:2] != (b, v):
            raise ValueError(f"tokens {tokens.shape} do not match visible index grid {visible.shape}")
        x = self.embed(tokens)
        pos = ad.reshape(ad.take_rows(self.pos, visible.reshape(-1)), (b, v, self.config.dim))
        x = x + pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def encode_pair(self, x1: np.ndarray, x2: np.ndarray, mask1: MaskSpec, mask2: MaskSpec):
        """Encode two masked token matrices with the shared weights.

        Returns one EncodedView per view; both views ride through a single
        batched forward pass.
        """
        t = self.config.tokens
        if mask1.total != t or mask2.total != t:
            raise ValueError("mask token count does not match encoder config")
        if len(mask1.visible) != len(mask2.visible):
            raise ValueError("views must have equal visible counts to batch")
        stacked = np.stack([np.asarray(x1)[mask1.visible], np.asarray(x2)[mask2.visible]])
        visible = np.stack([mask1.visible, mask2.visible])
        out = self.forward_visible(Tensor(stacked.astype(self.dtype, copy=False)), visible)
        v, d = len(mask1.visible), self.config.dim
        h1 = ad.reshape(ad.take_rows(out, np.array([0])), (v, d))
        h2 = ad.reshape(ad.take_rows(out, np.array([1])), (v, d))
        grid = self.config.grid
        return EncodedView(h1, mask1, grid), EncodedView(h2, mask2, grid)

    def encode_images(self, images) -> Tensor:
        """Inference path: encode full token grids, shape (B, T, dim)."""
        tokens = np.stack([patchify(img, self.config.patch) for img in images])
        b, t = tokens.shape[:2]
        visible = np.broadcast_to(np.arange(t), (b, t)).copy()
        return self.forward_visible(Tensor(tokens.astype(self.dtype, copy=False)), visible)

    def encode_full(self, img: Image) -> Tensor:
        """Encode every token of one image, shape (T, dim)."""
        out = self.encode_images([img])
        return ad.reshape(out, (self.config.tokens, self.config.dim))
