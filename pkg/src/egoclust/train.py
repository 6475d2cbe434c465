"""Joint training of the masked-reconstruction and contrastive branches.

The two branches share one encoder.  Every step augments each source image
into two views, masks both views independently, runs a single batched
encoder pass over all 2N visible-token sets, then routes the encodings to
the decoder (view 1) and the projection head (both views).  The combined
objective is a convex-style blend ``alpha * l_mae + (1 - alpha) * beta *
l_con`` minimized with decoupled-weight-decay Adam under a stepwise decay
schedule.

Branch modes allow ablation runs that optimize a single objective:
``joint`` (default), ``mae``, ``contrastive-masked``, and
``contrastive-unmasked`` (masking disabled for the contrastive pair).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, zero_grads
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .contrastive import ProjectionHead, contrastive_loss
from .encoder import Encoder, EncoderConfig, no_mask, patchify, sample_mask
from .imaging import AugmentPolicy, Image, make_views
from .mae import DecoderConfig, MaeDecoder, masked_mse

BRANCH_MODES = ("joint", "mae", "contrastive-masked", "contrastive-unmasked")

# rng stream tags (arbitrary, fixed): batch order / augmentation+mask draws
_SHUFFLE_TAG = 0x0DD5
_VIEW_TAG = 0xA0C5


class TrainingDiverged(RuntimeError):
    """Raised when the optimized loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.8
    beta: float = 0.02
    tau: float = 0.5
    base_lr: float = 5e-5
    lr_decay: float = 0.8
    decay_period: int = 15
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    branch: str = "joint"
    # stop once the epoch-mean loss has improved by less than min_improvement
    # (relative) for patience consecutive epochs; patience=0 disables
    patience: int = 10
    min_improvement: float = 0.005
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.base_lr <= 0.0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.decay_period < 1:
            raise ValueError("decay_period must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ValueError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0.0:
            raise ValueError("adam_eps must be positive")
        if self.branch not in BRANCH_MODES:
            raise ValueError(f"unknown branch {self.branch!r}; expected one of {BRANCH_MODES}")
        if self.patience < 0 or self.min_improvement < 0.0:
            raise ValueError("patience and min_improvement must be nonnegative")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be nonnegative")


def default_batch_size(branch: str) -> int:
    """32 for every mode except the unmasked contrastive baseline (16)."""
    return 16 if branch == "contrastive-unmasked" else 32


class CmNet:
    """Encoder plus the two branch heads, addressable as one parameter dict."""

    def __init__(
        self,
        config: EncoderConfig,
        decoder: DecoderConfig | None = None,
        seed: int = 0,
        channels: int = 32,
        dtype=np.float32,
    ):
        rng = np.random.default_rng([seed, 0xC37])
        self.config = config
        self.dtype = np.dtype(dtype)
        self.encoder = Encoder(config, rng, dtype)
        self.mae_decoder = MaeDecoder(config, decoder or DecoderConfig(), rng, dtype)
        self.proj_head = ProjectionHead(config, rng, channels, dtype)

    def params(self) -> dict:
        out = {}
        for prefix, module in (
            ("encoder", self.encoder),
            ("mae_decoder", self.mae_decoder),
            ("proj_head", self.proj_head),
        ):
            for name, p in module.params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def save(self, path) -> None:
        save_checkpoint(self.params(), path)

    def load(self, path) -> None:
        arrays = load_checkpoint(path)
        params = self.params()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise CheckpointError(f"parameter names do not match (missing {missing}, extra {extra})")
        for name, p in params.items():
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != expected {p.data.shape}")
            p.data[...] = arr.astype(p.data.dtype, copy=False)


def joint_loss(l_mae, l_con, alpha: float, beta: float):
    """Blend the branch losses: alpha * l_mae + (1 - alpha) * beta * l_con.

    Accepts plain floats or Tensors; with Tensor inputs the blend stays on
    the active tape.
    """
    return alpha * l_mae + (1.0 - alpha) * beta * l_con


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Stepwise schedule: base_lr * lr_decay ** (epoch // decay_period)."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return cfg.base_lr * cfg.lr_decay ** (epoch // cfg.decay_period)


class AdamWState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, cfg: TrainConfig) -> None:
    """One in-place AdamW update; parameters without a gradient are skipped."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # decay is decoupled: applied to the raw parameter, not the moments
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)


def _batch_views(net: CmNet, images, policy: AugmentPolicy, rng) -> tuple:
    """Augment each image into two views and patchify: ([view1 tokens], [view2 tokens])."""
    first, second = [], []
    for img in images:
        v1, v2 = make_views(img, policy, rng)
        first.append(patchify(v1, net.config.patch).astype(net.dtype))
        second.append(patchify(v2, net.config.patch).astype(net.dtype))
    return first, second


def training_step(
    net: CmNet,
    images,
    cfg: TrainConfig,
    policy: AugmentPolicy,
    rng,
    lr: float,
    state: AdamWState,
) -> dict:
    """One optimizer update on a batch of source images.

    Returns {"l_mae", "l_con", "joint"} as floats; branch modes that skip a
    loss report it as 0.0 and "joint" is always the scalar actually
    optimized.  Raises TrainingDiverged if that scalar is not finite.
    """
    if not images:
        raise ValueError("empty batch")
    if tuple(policy.out_size) != tuple(net.config.image_size):
        raise ValueError(
            f"augmentation out_size {policy.out_size} must match the encoder "
            f"image size {net.config.image_size}"
        )
    n = len(images)
    total = net.config.tokens
    need_mae = cfg.branch in ("joint", "mae")
    need_con = cfg.branch != "mae"

    tokens1, tokens2 = _batch_views(net, images, policy, rng)
    if cfg.branch == "contrastive-unmasked":
        masks1 = [no_mask(total) for _ in range(n)]
        masks2 = [no_mask(total) for _ in range(n)]
    else:
        masks1 = [sample_mask(total, net.config.mask_rate, rng) for _ in range(n)]
        masks2 = [sample_mask(total, net.config.mask_rate, rng) for _ in range(n)]
    visible1 = np.stack([m.visible for m in masks1])
    masked1 = np.stack([m.masked for m in masks1])

    params = net.params()
    zero_grads(params)
    with Tape() as tape:
        if need_con:
            visible2 = np.stack([m.visible for m in masks2])
            masked2 = np.stack([m.masked for m in masks2])
            rows = [t[m.visible] for t, m in zip(tokens1, masks1)]
            rows += [t[m.visible] for t, m in zip(tokens2, masks2)]
            out = net.encoder.forward_visible(
                Tensor(np.stack(rows)), np.concatenate([visible1, visible2])
            )
            v, d = out.shape[1], out.shape[2]
            h1 = ad.reshape(ad.take_rows(out, np.arange(n)), (n, v, d))
            h2 = ad.reshape(ad.take_rows(out, np.arange(n, 2 * n)), (n, v, d))
        else:
            rows = [t[m.visible] for t, m in zip(tokens1, masks1)]
            h1 = net.encoder.forward_visible(Tensor(np.stack(rows)), visible1)

        l_mae_t = None
        l_con_t = None
        if need_mae:
            recon = net.mae_decoder.decode_batch(h1, visible1, masked1)
            target = np.stack([t[m.masked] for t, m in zip(tokens1, masks1)])
            l_mae_t = masked_mse(recon, target)
        if need_con:
            z1 = net.proj_head.project_grids(h1, visible1, masked1, net.encoder.pos)
            z2 = net.proj_head.project_grids(h2, visible2, masked2, net.encoder.pos)
            l_con_t = contrastive_loss(z1, z2, cfg.tau)

        if cfg.branch == "joint":
            objective = joint_loss(l_mae_t, l_con_t, cfg.alpha, cfg.beta)
        elif cfg.branch == "mae":
            objective = l_mae_t
        else:
            objective = l_con_t
        joint_val = float(objective.data)
        if not math.isfinite(joint_val):
            raise TrainingDiverged(f"loss became {joint_val} on branch {cfg.branch}")
        tape.backward(objective)

    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    adamw_step(params, grads, state, lr, cfg)
    zero_grads(params)
    return {
        "l_mae": float(l_mae_t.data) if l_mae_t is not None else 0.0,
        "l_con": float(l_con_t.data) if l_con_t is not None else 0.0,
        "joint": joint_val,
    }


def load_encoder(config: EncoderConfig, path, dtype=np.float32) -> Encoder:
    """Build an encoder and load the ``encoder.*`` arrays from a checkpoint."""
    arrays = load_checkpoint(path)
    enc = Encoder(config, np.random.default_rng(0), dtype)
    for name, p in enc.params().items():
        key = f"encoder.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing {key}")
        arr = arrays[key]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{key}: shape {arr.shape} != expected {p.data.shape}")
        p.data[...] = arr.astype(p.data.dtype, copy=False)
    return enc


@dataclass
class TrainResult:
    epochs_run: int
    epoch_means: list
    stopped_early: bool
    checkpoint: Path
    log: Path


def train(
    images,
    net: CmNet,
    cfg: TrainConfig,
    out_dir,
    policy: AugmentPolicy | None = None,
) -> TrainResult:
    """Optimize net on a list of source images; writes loss log and checkpoint.

    Per epoch the image order is reshuffled and the augmentation/mask draws
    are reseeded, both from streams keyed by (cfg.seed, epoch), so a rerun
    with the same seed reproduces the loss log exactly.  Emits
    ``loss_log.jsonl`` (one record per batch) and ``cmnet.ckpt`` in out_dir,
    plus numbered snapshots every ``cfg.checkpoint_every`` epochs when set.
    """
    if not images:
        raise ValueError("empty pretraining set")
    if policy is None:
        policy = AugmentPolicy(out_size=net.config.image_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.jsonl"
    ckpt_path = out / "cmnet.ckpt"

    state = AdamWState(net.params())
    n = len(images)
    means: list = []
    best = math.inf
    stall = 0
    stopped_early = False
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = np.random.default_rng([cfg.seed, _SHUFFLE_TAG, epoch]).permutation(n)
            step_rng = np.random.default_rng([cfg.seed, _VIEW_TAG, epoch])
            batch_losses = []
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                batch = [images[i] for i in order[start : start + cfg.batch_size]]
                scalars = training_step(net, batch, cfg, policy, step_rng, lr, state)
                record = {"epoch": epoch, "batch": b, **scalars, "lr": lr}
                log.write(json.dumps(record) + "\n")
                batch_losses.append(scalars["joint"])
            log.flush()
            mean = float(np.mean(batch_losses))
            means.append(mean)
            if mean < best * (1.0 - cfg.min_improvement):
                best = mean
                stall = 0
            else:
                stall += 1
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                net.save(out / f"cmnet_epoch{epoch + 1:04d}.ckpt")
            if cfg.patience and stall >= cfg.patience:
                stopped_early = True
                break
    net.save(ckpt_path)
    return TrainResult(
        epochs_run=len(means),
        epoch_means=means,
        stopped_early=stopped_early,
        checkpoint=ckpt_path,
        log=log_path,
    )
