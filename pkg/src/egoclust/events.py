"""Temporal event segmentation of a frame-embedding sequence.

Three phases: smooth (sliding-window mean of centered, L2-normalized
embeddings), cut (boundary wherever the cosine distance between the
smoothed contexts on either side of a gap exceeds theta, with weak
boundaries dropped until every run reaches the minimum length), and merge
(adjacent segments whose centroids sit closer than theta_m collapse,
nearest pair first).

Embeddings are centered across the sequence before anything else: pooled
transformer features share a large constant component, and without
centering every pairwise cosine distance collapses toward zero.  The cut
score compares the smoothed embedding half a window before the gap with
the one half a window after, so the two contexts share no frames;
immediately adjacent smoothed vectors overlap in all but one frame and
dilute any boundary contrast by roughly 1/w.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import ImageSequence
from .evaluate import FeatureSet, cluster_metrics

_EPS = 1e-12


@dataclass(frozen=True)
class SegmentationParams:
    window: int = 5
    theta: float = 0.3
    merge_theta: float = 0.15
    min_length: int = 3

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if not 0.0 <= self.theta <= 2.0:
            raise ValueError(f"theta must be in [0, 2], got {self.theta}")
        if not 0.0 <= self.merge_theta <= 2.0:
            raise ValueError(f"merge_theta must be in [0, 2], got {self.merge_theta}")
        if self.min_length < 1:
            raise ValueError("min_length must be at least 1")


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < _EPS and nb < _EPS:
        # two empty directions carry no evidence of change
        return 0.0
    sim = float(a @ b) / max(na * nb, _EPS)
    return float(min(2.0, max(0.0, 1.0 - sim)))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _EPS)


def smooth_embeddings(matrix: np.ndarray, window: int) -> np.ndarray:
    """Sliding-window mean (width `window`, centered, clipped at the ends)
    of the centered and L2-normalized rows."""
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("need a nonempty 2-D embedding matrix")
    normed = _normalize_rows(x - x.mean(axis=0))
    n = len(normed)
    lo = (window - 1) // 2
    hi = window // 2
    return np.stack([normed[max(0, i - lo) : min(n, i + hi + 1)].mean(axis=0) for i in range(n)])


def boundary_scores(smoothed: np.ndarray, window: int) -> np.ndarray:
    """Cut score per gap g (between rows g and g+1): cosine distance of the
    smoothed embeddings half a window to either side of the gap."""
    n = len(smoothed)
    lag = window // 2
    return np.array(
        [
            _cosine_distance(smoothed[max(0, g - lag)], smoothed[min(n - 1, g + 1 + lag)])
            for g in range(n - 1)
        ]
    )


def _enforce_min_length(bounds: list, scores: np.ndarray, n: int, min_length: int) -> list:
    """Drop the weakest boundary flanking a too-short run until none remain.

    Ties break toward the earlier boundary.
    """
    bounds = sorted(bounds)
    while bounds:
        edges = [0] + bounds + [n]
        lengths = np.diff(edges)
        short = {i for i, length in enumerate(lengths) if length < min_length}
        if not short:
            break
        candidates = [b for j, b in enumerate(bounds) if j in short or j + 1 in short]
        drop = min(candidates, key=lambda b: (scores[b - 1], b))
        bounds.remove(drop)
    return bounds


@dataclass(eq=False)
class EventSpan:
    id: int
    start: int
    end: int
    centroid: np.ndarray


class ClusterManifest:
    """Per-frame event assignment plus the event table.

    Events are contiguous runs with ids dense from 0 in temporal order;
    construction re-checks all of that so no invalid manifest can exist.
    """

    def __init__(self, frames, events, table):
        frames = np.asarray(frames, dtype=np.int64)
        events = np.asarray(events, dtype=np.int64)
        if frames.ndim != 1 or frames.shape != events.shape or len(frames) == 0:
            raise ValueError("frames and events must be matching nonempty 1-D arrays")
        if np.any(np.diff(frames) <= 0):
            raise ValueError("frame indices must be strictly increasing")
        run_starts = np.flatnonzero(np.r_[True, np.diff(events) != 0])
        run_ids = events[run_starts]
        if not np.array_equal(run_ids, np.arange(len(run_starts))):
            raise ValueError(
                "event ids must form contiguous runs numbered 0, 1, ... in temporal order"
            )
        if len(table) != len(run_starts):
            raise ValueError(f"event table has {len(table)} rows for {len(run_starts)} events")
        run_ends = np.r_[run_starts[1:], len(frames)] - 1
        dim = None
        for k, span in enumerate(table):
            if span.id != k:
                raise ValueError(f"event table out of order at id {span.id}")
            if span.start != frames[run_starts[k]] or span.end != frames[run_ends[k]]:
                raise ValueError(
                    f"event {k} span ({span.start}, {span.end}) does not match its frames"
                )
            centroid = np.asarray(span.centroid, dtype=np.float64)
            if centroid.ndim != 1 or not np.all(np.isfinite(centroid)):
                raise ValueError(f"event {k} centroid must be a finite vector")
            if dim is None:
                dim = len(centroid)
            elif len(centroid) != dim:
                raise ValueError("event centroids differ in dimension")
            span.centroid = centroid
        self.frames = frames
        self.events = events
        self.table = list(table)

    @property
    def n_events(self) -> int:
        return len(self.table)

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClusterManifest):
            return NotImplemented
        return (
            np.array_equal(self.frames, other.frames)
            and np.array_equal(self.events, other.events)
            and all(
                a.id == b.id
                and a.start == b.start
                and a.end == b.end
                and np.array_equal(a.centroid, b.centroid)
                for a, b in zip(self.table, other.table)
            )
        )


def segment_events(features, params: SegmentationParams | None = None) -> ClusterManifest:
    params = params or SegmentationParams()
    if isinstance(features, FeatureSet):
        matrix = features.matrix
        indices = features.indices
    else:
        matrix = np.asarray(features)
        indices = np.arange(len(matrix))
    if matrix.ndim != 2 or len(matrix) == 0:
        raise ValueError("need a nonempty 2-D feature matrix")
    n = len(matrix)
    if params.min_length > n:
        raise ValueError(f"min_length {params.min_length} exceeds sequence length {n}")

    x = matrix.astype(np.float64)
    normed = _normalize_rows(x - x.mean(axis=0))
    smoothed = smooth_embeddings(x, params.window)
    scores = boundary_scores(smoothed, params.window)
    bounds = [g + 1 for g in range(n - 1) if scores[g] > params.theta]
    bounds = _enforce_min_length(bounds, scores, n, params.min_length)

    edges = [0] + bounds + [n]
    segments = list(zip(edges[:-1], edges[1:]))
    centroids = [normed[a:b].mean(axis=0) for a, b in segments]
    while len(segments) > 1:
        dists = [_cosine_distance(centroids[i], centroids[i + 1]) for i in range(len(segments) - 1)]
        i = int(np.argmin(dists))
        if dists[i] >= params.merge_theta:
            break
        a, _ = segments[i]
        _, b = segments[i + 1]
        segments[i : i + 2] = [(a, b)]
        centroids[i : i + 2] = [normed[a:b].mean(axis=0)]

    events = np.empty(n, dtype=np.int64)
    table = []
    for k, ((a, b), centroid) in enumerate(zip(segments, centroids)):
        events[a:b] = k
        table.append(EventSpan(id=k, start=int(indices[a]), end=int(indices[b - 1]), centroid=centroid))
    return ClusterManifest(indices, events, table)


# ---------------------------------------------------------------------------
# manifest files


def _events_path(path: Path) -> Path:
    return path.with_name(path.name + ".events.json")


def write_manifest(manifest: ClusterManifest, path) -> None:
    """JSONL of {"frame", "event"} plus an event-table sidecar JSON."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for frame, event in zip(manifest.frames, manifest.events):
            fh.write(json.dumps({"frame": int(frame), "event": int(event)}) + "\n")
    payload = [
        {
            "id": span.id,
            "start": span.start,
            "end": span.end,
            "centroid": [float(v) for v in span.centroid],
        }
        for span in manifest.table
    ]
    _events_path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_manifest(path) -> ClusterManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise ValueError(f"{path}: empty manifest")
    frames = []
    events = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{ln}: malformed JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or "frame" not in rec or "event" not in rec:
            raise ValueError(f'{path}:{ln}: expected an object with "frame" and "event"')
        frames.append(int(rec["frame"]))
        events.append(int(rec["event"]))
    sidecar = _events_path(path)
    if not sidecar.exists():
        raise ValueError(f"{sidecar}: event table sidecar is missing")
    table = [
        EventSpan(
            id=int(row["id"]),
            start=int(row["start"]),
            end=int(row["end"]),
            centroid=np.array(row["centroid"], dtype=np.float64),
        )
        for row in json.loads(sidecar.read_text(encoding="utf-8"))
    ]
    return ClusterManifest(frames, events, table)


# ---------------------------------------------------------------------------
# ground-truth comparison


@dataclass
class AlignmentReport:
    agreement: float
    misaligned: list
    mapping: dict
    metrics: dict


def align_to_ground_truth(manifest: ClusterManifest, seq: ImageSequence) -> AlignmentReport:
    """Frame-level agreement after optimally matching event ids to labels.

    The matching maximizes matched-frame count over the contingency table;
    predicted events left unmatched (more events than labels) count every
    frame as misaligned.
    """
    if not seq.labeled:
        raise ValueError("ground-truth sequence has no labels")
    truth = seq.labels()
    if len(truth) != len(manifest):
        raise ValueError(f"length mismatch: {len(manifest)} predicted vs {len(truth)} labeled frames")
    seq_frames = np.array([f.index for f in seq.frames])
    if not np.array_equal(seq_frames, manifest.frames):
        raise ValueError("manifest frame indices do not match the labeled sequence")

    true_ids, true_inv = np.unique(truth, return_inverse=True)
    table = np.zeros((len(true_ids), manifest.n_events), dtype=np.int64)
    np.add.at(table, (true_inv, manifest.events), 1)
    rows, cols = linear_sum_assignment(-table)
    matched_true = np.full(manifest.n_events, -1)
    matched_true[cols] = rows
    agree = matched_true[manifest.events] == true_inv
    mapping = {int(c): true_ids[r].item() for r, c in zip(rows, cols)}
    return AlignmentReport(
        agreement=float(agree.mean()),
        misaligned=[int(f) for f in manifest.frames[~agree]],
        mapping=mapping,
        metrics=cluster_metrics(manifest.events, truth),
    )


def write_alignment_json(report: AlignmentReport, path) -> None:
    payload = {
        "agreement": report.agreement,
        "misaligned": report.misaligned,
        "mapping": {str(k): v for k, v in report.mapping.items()},
        "metrics": report.metrics,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
