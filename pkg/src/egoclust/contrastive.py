"""Contrastive branch: projection to channel grids, axis-wise similarity, loss.

Each view becomes a (C, W, H) grid: visible tokens are projected tokenwise
and scattered to their grid positions, masked positions are filled with the
projection of a learned fill token plus that position's encoder positional
row.  Similarity between two grids is the cosine of flattened C x H slabs
per W index, averaged over W.  The loss anchors on view 1 only.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncodedView, EncoderConfig
from .layers import Linear, flatten_params, trunc_normal

SIM_EPS = 1e-8


class ProjectionHead:
    """Two-layer tokenwise MLP D -> D -> C with a learned grid fill token."""

    def __init__(self, enc_config: EncoderConfig, rng: np.random.Generator, channels: int = 32, dtype=np.float32):
        self.enc_config = enc_config
        self.channels = channels
        d = enc_config.dim
        self.fc1 = Linear(d, d, rng, dtype)
        self.fc2 = Linear(d, channels, rng, dtype)
        self.fill_token = Tensor(trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)

    def params(self) -> dict:
        return flatten_params(
            {"fc1": self.fc1.params(), "fc2": self.fc2.params(), "": {"fill_token": self.fill_token}}
        )

    def project_tokens(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    def project_grids(self, tokens: Tensor, visible: np.ndarray, masked: np.ndarray, enc_pos: Tensor) -> Tensor:
        """Project a batch of views onto channel grids, shape (B, C, W, H).

        tokens (B, V, D) are visible-token embeddings at grid positions
        ``visible``; positions in ``masked`` get the fill-token projection.
        """
        b, v = visible.shape
        gw, gh = self.enc_config.grid
        t = self.enc_config.tokens
        c = self.channels
        grid = ad.put_rows(self.project_tokens(tokens), visible, t)
        m = masked.shape[1]
        if m:
            d = self.enc_config.dim
            pos_rows = ad.reshape(ad.take_rows(enc_pos, masked.reshape(-1)), (b, m, d))
            fill = self.project_tokens(pos_rows + self.fill_token)
            grid = grid + ad.put_rows(fill, masked, t)
        grid = ad.reshape(grid, (b, gh, gw, c))
        return ad.transpose(grid, (0, 3, 2, 1))

    def project(self, h1: EncodedView, h2: EncodedView, enc_pos: Tensor):
        """Grids for one image's two views, each (C, W, H)."""
        out = []
        for view in (h1, h2):
            v, d = view.tokens.shape
            grids = self.project_grids(
                ad.reshape(view.tokens, (1, v, d)),
                view.mask.visible[None],
                view.mask.masked[None],
                enc_pos,
            )
            gw, gh = self.enc_config.grid
            out.append(ad.reshape(grids, (self.channels, gw, gh)))
        return out[0], out[1]


def similarity(z: Tensor, zp: Tensor, eps: float = SIM_EPS) -> Tensor:
    """Mean over W of the cosine between flattened C x H slabs.

    The denominator is floored at ``eps``; a zero slab against anything
    scores 0.
    """
    if z.shape != zp.shape:
        raise ValueError(f"grid shapes disagree: {z.shape} vs {zp.shape}")
    c, w, h = z.shape
    a = ad.reshape(ad.transpose(z, (1, 0, 2)), (w, c * h))
    b = ad.reshape(ad.transpose(zp, (1, 0, 2)), (w, c * h))
    dots = (a * b).sum(axis=1)
    # clamp inside the sqrt so zero slabs keep a finite gradient
    na = ad.tsqrt(ad.clamp_min((a * a).sum(axis=1), eps * eps))
    nb = ad.tsqrt(ad.clamp_min((b * b).sum(axis=1), eps * eps))
    return (dots / ad.clamp_min(na * nb, eps)).mean()


def pairwise_similarity(za: Tensor, zb: Tensor, eps: float = SIM_EPS) -> Tensor:
    """All-pairs grid similarity: out[i, j] = Sim(za_i, zb_j), shape (N, N)."""
    n, c, w, h = za.shape
    if zb.shape != za.shape:
        raise ValueError(f"batch shapes disagree: {za.shape} vs {zb.shape}")
    a = ad.reshape(ad.transpose(za, (2, 0, 1, 3)), (w, n, c * h))
    b = ad.reshape(ad.transpose(zb, (2, 0, 1, 3)), (w, n, c * h))
    dots = ad.matmul(a, ad.transpose(b, (0, 2, 1)))
    na = ad.tsqrt(ad.clamp_min((a * a).sum(axis=2), eps * eps))
    nb = ad.tsqrt(ad.clamp_min((b * b).sum(axis=2), eps * eps))
    denom = ad.clamp_min(ad.matmul(ad.reshape(na, (w, n, 1)), ad.reshape(nb, (w, 1, n))), eps)
    return (dots / denom).mean(axis=0)


def contrastive_loss_from_sims(s11: Tensor, s12: Tensor, tau: float) -> Tensor:
    """Loss given precomputed similarity matrices.

    s11[i, j] = Sim(z1_i, z1_j) and s12[i, k] = Sim(z1_i, z2_k).  Anchor i
    scores exp(s12[i, i] / tau) against all other view-1 grids and every
    view-2 grid, its own positive included.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = s11.shape[0]
    if s11.shape != (n, n) or s12.shape != (n, n):
        raise ValueError(f"similarity matrices must be square, got {s11.shape} and {s12.shape}")
    inv_tau = 1.0 / tau
    e11 = ad.texp(s11 * inv_tau)
    e12 = ad.texp(s12 * inv_tau)
    eye = np.eye(n, dtype=s11.dtype)
    off_diag = Tensor(1.0 - eye)
    denom = (e11 * off_diag).sum(axis=1) + e12.sum(axis=1)
    numer = (e12 * Tensor(eye)).sum(axis=1)
    return (ad.tlog(denom) - ad.tlog(numer)).mean()


def contrastive_loss(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """Contrastive loss over a batch of paired grids (N, C, W, H)."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s11 = pairwise_similarity(z1, z1)
    s12 = pairwise_similarity(z1, z2)
    return contrastive_loss_from_sims(s11, s12, tau)
