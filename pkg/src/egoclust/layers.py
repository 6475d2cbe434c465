"""Shared building blocks: linear layers, layer norm, pre-norm transformer block.

All parameters are float32 by default; pass dtype=np.float64 to build a
double-precision model for gradient-check runs.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std, by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.w = Tensor(trunc_normal(rng, (d_in, d_out), dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gain, self.bias, eps=self.eps)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class Attention:
    """Multi-head self-attention over (..., tokens, dim) inputs."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        batch = x.shape[:-2]
        t = x.shape[-2]
        hd = self.head_dim

        def split_heads(y: Tensor) -> Tensor:
            y = ad.reshape(y, batch + (t, self.heads, hd))
            perm = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
            return ad.transpose(y, perm)  # (..., heads, t, hd)

        q = split_heads(self.q(x))
        k = split_heads(self.k(x))
        v = split_heads(self.v(x))
        nb = len(batch)
        kt = ad.transpose(k, tuple(range(nb + 1)) + (nb + 2, nb + 1))
        scores = ad.matmul(q, kt) * (1.0 / np.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)  # (..., heads, t, hd)
        perm = tuple(range(nb)) + (nb + 1, nb, nb + 2)
        ctx = ad.reshape(ad.transpose(ctx, perm), batch + (t, self.dim))
        return self.out(ctx)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for tag, layer in (("q", self.q), ("k", self.k), ("v", self.v), ("out", self.out)):
            for name, p in layer.params().items():
                out[f"{tag}.{name}"] = p
        return out


class Mlp:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for tag, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            for name, p in layer.params().items():
                out[f"{tag}.{name}"] = p
        return out


class TransformerBlock:
    """Pre-norm block: x + attn(ln1(x)), then x + mlp(ln2(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for tag, part in (("ln1", self.ln1), ("attn", self.attn), ("ln2", self.ln2), ("mlp", self.mlp)):
            for name, p in part.params().items():
                out[f"{tag}.{name}"] = p
        return out


def flatten_params(groups: dict[str, dict[str, Tensor]]) -> dict[str, Tensor]:
    """Merge {'prefix': {'name': tensor}} into {'prefix.name': tensor}; '' means no prefix."""
    out: dict[str, Tensor] = {}
    for prefix, params in groups.items():
        for name, p in params.items():
            key = f"{prefix}.{name}" if prefix else name
            if key in out:
                raise ValueError(f"duplicate parameter name {key}")
            out[key] = p
    return out
