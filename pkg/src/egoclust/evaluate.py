"""Representation quality checks: linear probing, clustering metrics, PCA export.

Features are mean-pooled full-grid encodings (no masking at inference).
The probe is a single linear layer trained with softmax cross-entropy on
frozen features; clustering agreement is measured with hand-computed ARI,
NMI (arithmetic-mean normalization), and purity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, no_grad, zero_grads
from .data import ImageSequence
from .encoder import Encoder
from .imaging import AugmentPolicy, augment
from .train import AdamWState, adamw_step

_SHUFFLE_TAG = 0x9B0E
_AUG_TAG = 0xAB6


@dataclass
class FeatureSet:
    """Per-frame feature rows plus the frame indices they came from."""

    matrix: np.ndarray
    indices: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        self.indices = np.asarray(self.indices)
        if self.matrix.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("feature matrix contains non-finite entries")
        if self.indices.shape != (len(self.matrix),):
            raise ValueError("need one frame index per feature row")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (len(self.matrix),):
                raise ValueError("need one label per feature row")

    def __len__(self) -> int:
        return len(self.matrix)


def extract_features(seq: ImageSequence, encoder: Encoder) -> FeatureSet:
    """Mean over the token embeddings of each frame's full (unmasked) encoding."""
    with no_grad():
        rows = [encoder.encode_full(f.image).data.mean(axis=0) for f in seq.frames]
    labels = seq.labels() if seq.labeled else None
    indices = np.array([f.index for f in seq.frames])
    return FeatureSet(np.stack(rows), indices, labels)


# ---------------------------------------------------------------------------
# linear probe


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0.0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr must be positive, epochs and batch_size at least 1")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass
class ProbeResult:
    top1: float
    per_class: dict
    confusion: np.ndarray
    classes: list

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0:
            raise ValueError(f"top1 must be in [0, 1], got {self.top1}")
        k = len(self.classes)
        if self.confusion.shape != (k, k):
            raise ValueError("confusion matrix must be square over the class list")


def _cross_entropy(logits: Tensor, y_idx: np.ndarray) -> Tensor:
    # the per-row max shift is a constant; cross-entropy is shift-invariant,
    # so detaching it changes nothing but keeps exp() in range
    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - shift
    lse = ad.tlog(ad.texp(z).sum(axis=1))
    onehot = np.zeros(z.shape, dtype=z.dtype)
    onehot[np.arange(len(y_idx)), y_idx] = 1.0
    return (lse - (z * onehot).sum(axis=1)).mean()


def _fit_classifier(features_for_epoch, n_rows: int, dim: int, k: int, y_idx, cfg: ProbeConfig):
    """features_for_epoch(epoch) -> (n_rows, dim) matrix; returns (w, b) arrays."""
    w = Tensor(np.zeros((dim, k)), requires_grad=True)
    b = Tensor(np.zeros(k), requires_grad=True)
    params = {"w": w, "b": b}
    state = AdamWState(params)
    for epoch in range(cfg.epochs):
        x = features_for_epoch(epoch)
        order = np.random.default_rng([cfg.seed, _SHUFFLE_TAG, epoch]).permutation(n_rows)
        for start in range(0, n_rows, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            zero_grads(params)
            with Tape() as tape:
                logits = ad.add(ad.matmul(Tensor(x[sel]), w), b)
                tape.backward(_cross_entropy(logits, y_idx[sel]))
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            adamw_step(params, grads, state, cfg.lr, cfg)
    return w.data, b.data


def _class_index(labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(classes, labels)
    return idx


def _evaluate(w, b, features: FeatureSet, classes: np.ndarray) -> ProbeResult:
    pred = np.argmax(features.matrix.astype(np.float64) @ w + b, axis=1)
    y_idx = _class_index(features.labels, classes)
    k = len(classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y_idx, pred), 1)
    supports = confusion.sum(axis=1)
    per_class = {
        classes[i].item() if hasattr(classes[i], "item") else classes[i]:
            float(confusion[i, i] / supports[i])
        for i in range(k)
        if supports[i] > 0
    }
    top1 = float(np.trace(confusion) / len(features))
    return ProbeResult(top1=top1, per_class=per_class, confusion=confusion, classes=list(classes))


def _check_splits(train: FeatureSet, test: FeatureSet) -> np.ndarray:
    if train.labels is None or test.labels is None:
        raise ValueError("probing requires labeled feature sets")
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ValueError("probe training labels collapse to a single class")
    if not np.all(np.isin(test.labels, classes)):
        unseen = sorted(set(np.unique(test.labels)) - set(classes))
        raise ValueError(f"test labels {unseen} never appear in the training split")
    return classes


def linear_probe(train: FeatureSet, test: FeatureSet, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Fit a linear classifier on frozen train features, report test accuracy."""
    cfg = cfg or ProbeConfig()
    classes = _check_splits(train, test)
    x = train.matrix.astype(np.float64)
    y_idx = _class_index(train.labels, classes)
    w, b = _fit_classifier(lambda _epoch: x, len(x), x.shape[1], len(classes), y_idx, cfg)
    return _evaluate(w, b, test, classes)


def probe_from_images(
    train_seq: ImageSequence,
    test_seq: ImageSequence,
    encoder: Encoder,
    cfg: ProbeConfig | None = None,
    policy: AugmentPolicy | None = None,
) -> ProbeResult:
    """Linear probe with fresh crop/flip views of the training frames each epoch.

    Test features are extracted once, unaugmented.
    """
    cfg = cfg or ProbeConfig()
    if policy is None:
        # probe-time augmentation is crop and flip only
        policy = AugmentPolicy(
            out_size=encoder.config.image_size,
            jitter_prob=0.0,
            grayscale_prob=0.0,
            blur_prob=0.0,
        )
    train_feats = extract_features(train_seq, encoder)
    test_feats = extract_features(test_seq, encoder)
    classes = _check_splits(train_feats, test_feats)
    y_idx = _class_index(train_feats.labels, classes)

    def features_for_epoch(epoch: int) -> np.ndarray:
        rng = np.random.default_rng([cfg.seed, _AUG_TAG, epoch])
        with no_grad():
            rows = [
                encoder.encode_full(augment(f.image, policy, rng)).data.mean(axis=0)
                for f in train_seq.frames
            ]
        return np.stack(rows).astype(np.float64)

    n, d = train_feats.matrix.shape
    w, b = _fit_classifier(features_for_epoch, n, d, len(classes), y_idx, cfg)
    return _evaluate(w, b, test_feats, classes)


# ---------------------------------------------------------------------------
# clustering agreement


def _contingency(true: np.ndarray, pred: np.ndarray) -> np.ndarray:
    _, true_inv = np.unique(true, return_inverse=True)
    _, pred_inv = np.unique(pred, return_inverse=True)
    table = np.zeros((true_inv.max() + 1, pred_inv.max() + 1), dtype=np.int64)
    np.add.at(table, (true_inv, pred_inv), 1)
    return table


def _comb2(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand_index(pred, true) -> float:
    table = _contingency(np.asarray(true), np.asarray(pred))
    n = table.sum()
    sum_cells = _comb2(table).sum()
    a = _comb2(table.sum(axis=1)).sum()
    b = _comb2(table.sum(axis=0)).sum()
    c2n = _comb2(n)
    expected = a * b / c2n if c2n > 0 else 0.0
    denom = 0.5 * (a + b) - expected
    if denom == 0.0:
        return 1.0
    return float((sum_cells - expected) / denom)


def normalized_mutual_info(pred, true) -> float:
    table = _contingency(np.asarray(true), np.asarray(pred))
    n = table.sum()
    # marginals come from exact integer sums and every float reduction runs
    # over sorted contributions; otherwise cluster relabelings permute the
    # summation order and shift the result by an ulp
    p = table / n
    pi = table.sum(axis=1) / n
    pj = table.sum(axis=0) / n
    nz = p > 0
    mi = float(np.sort(p[nz] * np.log(p[nz] / np.outer(pi, pj)[nz])).sum())
    h_true = float(-np.sort(pi[pi > 0] * np.log(pi[pi > 0])).sum())
    h_pred = float(-np.sort(pj[pj > 0] * np.log(pj[pj > 0])).sum())
    mean_h = 0.5 * (h_true + h_pred)
    if mean_h == 0.0:
        return 1.0
    return mi / mean_h


def purity(pred, true) -> float:
    table = _contingency(np.asarray(true), np.asarray(pred))
    # majority true class within each predicted cluster
    return float(table.max(axis=0).sum() / table.sum())


def cluster_metrics(pred, true) -> dict:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.size == 0:
        raise ValueError("empty label arrays")
    if pred.shape != true.shape:
        raise ValueError(f"label arrays differ in shape: {pred.shape} vs {true.shape}")
    return {
        "ari": adjusted_rand_index(pred, true),
        "nmi": normalized_mutual_info(pred, true),
        "purity": purity(pred, true),
    }


# ---------------------------------------------------------------------------
# PCA export


@dataclass
class PcaProjection:
    coords: np.ndarray       # (n, dims)
    components: np.ndarray   # (dims, D), orthonormal rows, variance-ordered
    variances: np.ndarray    # (dims,) descending
    mean: np.ndarray


def pca_project(features, dims: int = 2) -> PcaProjection:
    """Exact PCA of the feature rows via covariance eigendecomposition.

    Component signs are fixed by making each component's largest-magnitude
    entry positive, so repeated runs agree exactly.
    """
    x = features.matrix if isinstance(features, FeatureSet) else np.asarray(features)
    x = x.astype(np.float64)
    if x.ndim != 2:
        raise ValueError("features must be 2-D")
    n, d = x.shape
    if dims < 1 or dims > d:
        raise ValueError(f"dims must be in [1, {d}], got {dims}")
    if n < max(dims, 2):
        raise ValueError(f"need at least {max(dims, 2)} rows, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:dims]
    variances = np.clip(eigvals[order], 0.0, None)
    components = eigvecs[:, order].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaProjection(
        coords=centered @ components.T,
        components=components,
        variances=variances,
        mean=mean,
    )


# ---------------------------------------------------------------------------
# file export


def write_features_csv(features: FeatureSet, path) -> None:
    """Rows of frame_index,f0..fD-1."""
    d = features.matrix.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index"] + [f"f{i}" for i in range(d)])
        for idx, row in zip(features.indices, features.matrix):
            writer.writerow([int(idx)] + [repr(float(v)) for v in row])


def read_features_csv(path) -> FeatureSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "frame_index":
            raise ValueError(f"{path}: not a feature table")
        rows = list(reader)
    indices = np.array([int(r[0]) for r in rows])
    matrix = np.array([[float(v) for v in r[1:]] for r in rows])
    return FeatureSet(matrix, indices)


def write_projection_csv(features: FeatureSet, proj: PcaProjection, path) -> None:
    """Rows of frame_index,x,y,event_id; event_id is blank when unlabeled."""
    if proj.coords.shape[1] != 2:
        raise ValueError("projection export expects 2-D coordinates")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "x", "y", "event_id"])
        for i, idx in enumerate(features.indices):
            label = "" if features.labels is None else features.labels[i]
            writer.writerow([int(idx), repr(float(proj.coords[i, 0])), repr(float(proj.coords[i, 1])), label])


def write_metrics_json(metrics: dict, path) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_probe_json(result: ProbeResult, path) -> None:
    payload = {
        "top1": result.top1,
        "per_class": {str(k): v for k, v in result.per_class.items()},
        "classes": [c.item() if hasattr(c, "item") else c for c in result.classes],
        "confusion": result.confusion.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
