"""Reconstruction branch: thin decoder over the full token grid, masked MSE.

The decoder sees visible-token embeddings scattered back into their grid
positions, a shared learned token standing in at every masked position,
and its own positional table.  Only masked rows are reconstructed and
scored, against raw pixel patches of the augmented image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncodedView, EncoderConfig, MaskSpec
from .layers import LayerNorm, Linear, TransformerBlock, flatten_params, trunc_normal

_DECODER_MLP_RATIO = 4.0


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"decoder dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("decoder depth must be at least 1")


class MaeDecoder:
    """Decode masked grid positions back to pixel patches."""

    def __init__(
        self,
        enc_config: EncoderConfig,
        config: DecoderConfig,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.enc_config = enc_config
        self.config = config
        d = config.dim
        self.embed = Linear(enc_config.dim, d, rng, dtype)
        self.mask_token = Tensor(trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
        self.pos = Tensor(trunc_normal(rng, (enc_config.tokens, d), dtype=dtype), requires_grad=True)
        self.blocks = [
            TransformerBlock(d, config.heads, _DECODER_MLP_RATIO, rng, dtype)
            for _ in range(config.depth)
        ]
        self.norm = LayerNorm(d, dtype)
        self.head = Linear(d, enc_config.patch_dim, rng, dtype)

    def params(self) -> dict:
        """Checkpoint names: trunk under a prefix added by the caller, but
        ``mask_token`` and ``decoder_pos`` are stored bare."""
        groups = {
            "embed": self.embed.params(),
            "norm": self.norm.params(),
            "head": self.head.params(),
            "": {"mask_token": self.mask_token, "decoder_pos": self.pos},
        }
        for i, blk in enumerate(self.blocks):
            groups[f"blocks.{i}"] = blk.params()
        return flatten_params(groups)

    def decode_batch(self, tokens: Tensor, visible: np.ndarray, masked: np.ndarray) -> Tensor:
        """Decode a batch of views at once.

        tokens (B, V, enc_dim) with grid positions ``visible`` (B, V);
        returns reconstructions for ``masked`` (B, M) as (B, M, patch_dim).
        """
        b = tokens.shape[0]
        t = self.enc_config.tokens
        d = self.config.dim
        x = self.embed(tokens)
        scattered = ad.put_rows(x, visible, t)
        indicator = np.zeros((b, t, 1), dtype=tokens.dtype)
        batch = np.arange(b)[:, None]
        indicator[batch, masked] = 1.0
        x = scattered + ad.matmul(Tensor(indicator), ad.reshape(self.mask_token, (1, d)))
        x = x + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.head(self.norm(x))
        return ad.take_rows(x, masked)

    def decode(self, view: EncodedView) -> Tensor:
        """Reconstruct one view's masked patches, shape (|masked|, patch_dim)."""
        if view.mask.total != self.enc_config.tokens:
            raise ValueError(
                f"view has {view.mask.total} tokens but decoder table has {self.enc_config.tokens}"
            )
        v, d_in = view.tokens.shape
        tokens = ad.reshape(view.tokens, (1, v, d_in))
        out = self.decode_batch(tokens, view.mask.visible[None], view.mask.masked[None])
        return ad.reshape(out, (len(view.mask.masked), self.enc_config.patch_dim))


def masked_mse(recon: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over every entry of the reconstructed rows."""
    target = np.asarray(target)
    if target.size == 0:
        raise ValueError("reconstruction loss undefined for an empty mask")
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: reconstruction {recon.shape} vs target {target.shape}")
    diff = recon - Tensor(target.astype(recon.dtype))
    return (diff * diff).mean()


def mae_loss(recon: Tensor, original_tokens: np.ndarray, mask: MaskSpec) -> Tensor:
    """Score reconstructed patches against the original augmented patches.

    The target rows are the original tokens at masked indices, which is
    exactly the original minus its masked version restricted to those rows.
    """
    if len(mask.masked) == 0:
        raise ValueError("reconstruction loss undefined for an empty mask")
    target = np.asarray(original_tokens)[mask.masked]
    return masked_mse(recon, target)
