"""Sequence containers, a synthetic stream generator, and dataset splits.

The synthetic generator renders each event from a distinct procedural base
pattern and adds small per-frame jitter, so ground truth event boundaries
are known exactly.  Directory ingestion accepts the same layout the
generator writes: numbered images plus a JSON Lines manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import Image, read_image, write_png

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class Frame:
    """One image in a stream, with its position and optional event label."""

    image: Image
    index: int
    event: int | None = None


class ImageSequence:
    """Ordered frames from one source.

    Indices must be strictly increasing.  Labels are all-or-nothing, and
    each event label must occupy one contiguous run of frames.
    """

    def __init__(self, frames, source: str = ""):
        frames = list(frames)
        if not frames:
            raise ValueError("sequence must contain at least one frame")
        for prev, cur in zip(frames, frames[1:]):
            if cur.index <= prev.index:
                raise ValueError(
                    f"frame indices must be strictly increasing, got {prev.index} then {cur.index}"
                )
        n_labeled = sum(1 for f in frames if f.event is not None)
        if n_labeled not in (0, len(frames)):
            raise ValueError(f"{len(frames) - n_labeled} of {len(frames)} frames are missing labels")
        if n_labeled:
            _check_contiguous([f.event for f in frames])
        self.frames = frames
        self.source = source

    @property
    def labeled(self) -> bool:
        return self.frames[0].event is not None

    def labels(self) -> np.ndarray:
        if not self.labeled:
            raise ValueError(f"sequence {self.source!r} has no labels")
        return np.array([f.event for f in self.frames], dtype=np.int64)

    def images(self):
        return [f.image for f in self.frames]

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]


def _check_contiguous(labels) -> None:
    seen = set()
    prev = None
    for lab in labels:
        if lab != prev and lab in seen:
            raise ValueError(f"event label {lab} appears in more than one run")
        seen.add(lab)
        prev = lab


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the procedural stream generator.

    ``separation`` scales each event's base pattern around mid-gray while
    ``jitter`` sets the per-frame translation, brightness, and noise
    magnitude, so separation/jitter is the effective contrast between
    between-event and within-event variation.
    """

    events: int = 5
    frames_per_event: tuple = (40, 40)
    size: tuple = (64, 64)
    palette_blocks: int = 4
    texture_freq: tuple = (2.0, 8.0)
    blobs: int = 3
    jitter: float = 0.02
    separation: float = 0.35

    def __post_init__(self):
        if self.events < 1:
            raise ValueError("need at least one event")
        lo, hi = self.frames_per_event
        if not (1 <= lo <= hi):
            raise ValueError(f"bad frames_per_event range {self.frames_per_event}")
        if self.size[0] < 8 or self.size[1] < 8:
            raise ValueError(f"image size too small: {self.size}")
        if self.jitter < 0.0 or self.separation < 0.0:
            raise ValueError("jitter and separation must be non-negative")
        if self.palette_blocks < 1 or self.blobs < 0:
            raise ValueError("bad pattern parameters")


def well_separated(events: int = 5, frames: int = 40, size: tuple = (64, 64)) -> SyntheticSpec:
    """Preset whose events are far apart relative to within-event jitter."""
    spec = SyntheticSpec(
        events=events,
        frames_per_event=(frames, frames),
        size=size,
        jitter=0.02,
        separation=0.45,
    )
    assert spec.jitter < spec.separation
    return spec


def _event_signature(spec: SyntheticSpec, rng) -> np.ndarray:
    """Zero-mean base pattern with peak amplitude 1, shape (3, H, W)."""
    h, w = spec.size
    sig = np.zeros((3, h, w))

    # solid-color palette blocks
    k = spec.palette_blocks
    cells = rng.uniform(-1.0, 1.0, size=(3, k, k))
    ys = np.minimum(np.arange(h) * k // h, k - 1)
    xs = np.minimum(np.arange(w) * k // w, k - 1)
    sig += cells[:, ys[:, None], xs[None, :]]

    # sinusoidal texture
    fy = rng.uniform(spec.texture_freq[0], spec.texture_freq[1])
    fx = rng.uniform(spec.texture_freq[0], spec.texture_freq[1])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    wave = np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
    sig += rng.uniform(-1.0, 1.0, size=(3, 1, 1)) * wave

    # soft blobs
    for _ in range(spec.blobs):
        cy = rng.uniform(0.0, 1.0) * h
        cx = rng.uniform(0.0, 1.0) * w
        r = rng.uniform(0.05, 0.2) * min(h, w)
        d2 = (np.arange(h)[:, None] - cy) ** 2 + (np.arange(w)[None, :] - cx) ** 2
        blob = np.exp(-d2 / (2.0 * r * r))
        sig += rng.uniform(-1.0, 1.0, size=(3, 1, 1)) * blob

    sig -= sig.mean()
    peak = np.abs(sig).max()
    if peak > 0.0:
        sig /= peak
    return sig


def generate_synthetic(spec: SyntheticSpec, seed: int) -> ImageSequence:
    """Render a labeled stream of contiguous events.

    Bit-identical for a fixed (spec, seed).  Frames are
    clip(0.5 + separation * shifted_signature + brightness + noise).
    """
    rng = np.random.default_rng([int(seed), 0x5EED])
    signatures = [_event_signature(spec, rng) for _ in range(spec.events)]
    counts = rng.integers(spec.frames_per_event[0], spec.frames_per_event[1] + 1, size=spec.events)

    h, w = spec.size
    max_shift = int(round(spec.jitter * min(h, w)))
    noise_std = 0.25 * spec.jitter

    frames = []
    idx = 0
    for e in range(spec.events):
        for _ in range(int(counts[e])):
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            base = np.roll(signatures[e], (int(dy), int(dx)), axis=(1, 2))
            brightness = rng.uniform(-spec.jitter, spec.jitter)
            noise = rng.normal(0.0, noise_std, size=(3, h, w))
            pix = 0.5 + spec.separation * base + brightness + noise
            frames.append(Frame(Image(np.clip(pix, 0.0, 1.0)), index=idx, event=e))
            idx += 1
    return ImageSequence(frames, source=f"synthetic-{seed}")


# ---------------------------------------------------------------------------
# disk I/O


def save_sequence(seq: ImageSequence, directory) -> Path:
    """Write frames as PNGs plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / MANIFEST_NAME
    with open(manifest, "w") as fh:
        for frame in seq:
            name = f"{frame.index:06d}.png"
            write_png(frame.image, directory / name)
            fh.write(json.dumps({"file": name, "index": frame.index, "event": frame.event}) + "\n")
    return manifest


def _frames_from_manifest(directory: Path, manifest: Path):
    entries = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{manifest}:{lineno}: bad JSON ({exc})") from None
            if "file" not in obj or "index" not in obj:
                raise ValueError(f"{manifest}:{lineno}: entry needs 'file' and 'index'")
            entries.append(obj)
    if not entries:
        raise ValueError(f"no frames listed in {manifest}")
    entries.sort(key=lambda o: o["index"])
    seen = set()
    frames = []
    for obj in entries:
        if obj["index"] in seen:
            raise ValueError(f"duplicate frame index {obj['index']} in {manifest}")
        seen.add(obj["index"])
        path = directory / obj["file"]
        if not path.is_file():
            raise ValueError(f"missing image file {path}")
        frames.append(Frame(read_image(path), index=int(obj["index"]), event=obj.get("event")))
    return frames


def load_directory(path, manifest=None) -> ImageSequence:
    """Load a frame directory, ordered by index.

    With a manifest (or one named ``manifest.jsonl`` in the directory),
    file names, indices, and labels come from it.  Otherwise images are
    ordered by their zero-padded numeric file names.
    """
    directory = Path(path)
    if not directory.is_dir():
        raise ValueError(f"not a directory: {directory}")
    if manifest is None:
        candidate = directory / MANIFEST_NAME
        manifest = candidate if candidate.is_file() else None
    if manifest is not None:
        frames = _frames_from_manifest(directory, Path(manifest))
        return ImageSequence(frames, source=str(directory))

    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if not files:
        raise ValueError(f"no frames in {directory}")
    stems = [p.stem for p in files]
    numeric = all(s.isdigit() for s in stems)
    frames = []
    for pos, p in enumerate(files):
        idx = int(p.stem) if numeric else pos
        frames.append(Frame(read_image(p), index=idx))
    return ImageSequence(frames, source=str(directory))


# ---------------------------------------------------------------------------
# splits


@dataclass
class Split:
    """Pretraining pool plus stratified probe train/test frames."""

    pretrain: list
    probe_train: list
    probe_test: list
    seed: int
    ratio: float


def split(sequences, mode: str = "shared", ratio: float = 0.8, seed: int = 0) -> Split:
    """Carve a collection into pretrain and probe sets.

    ``mode="shared"`` pretrains on every frame (labels ignored);
    ``mode="disjoint"`` pretrains only on unlabeled sequences.  Probe
    train/test are stratified per event label at ``ratio``; unlabeled
    frames never enter the probe sets.
    """
    if mode not in ("shared", "disjoint"):
        raise ValueError(f"unknown split mode {mode!r}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if isinstance(sequences, ImageSequence):
        sequences = [sequences]

    all_frames = [f for seq in sequences for f in seq]
    labeled = [f for seq in sequences if seq.labeled for f in seq]
    if mode == "shared":
        pretrain = all_frames
    else:
        pretrain = [f for seq in sequences if not seq.labeled for f in seq]

    if not labeled:
        raise ValueError("no labeled frames available for probe splits")
    by_class: dict = {}
    for pos, frame in enumerate(labeled):
        by_class.setdefault(frame.event, []).append(pos)

    rng = np.random.default_rng([int(seed), 0x51317])
    train_idx = []
    test_idx = []
    for label in sorted(by_class):
        positions = np.array(by_class[label])
        if len(positions) < 2:
            raise ValueError(f"event {label} has {len(positions)} frame(s); cannot stratify")
        rng.shuffle(positions)
        n_train = int(round(ratio * len(positions)))
        n_train = min(max(n_train, 1), len(positions) - 1)
        train_idx.extend(positions[:n_train].tolist())
        test_idx.extend(positions[n_train:].tolist())
    train_idx.sort()
    test_idx.sort()
    return Split(
        pretrain=pretrain,
        probe_train=[labeled[i] for i in train_idx],
        probe_test=[labeled[i] for i in test_idx],
        seed=int(seed),
        ratio=float(ratio),
    )


def write_split(result: Split, path) -> None:
    """Record which frame indices landed in each probe set."""
    payload = {
        "seed": result.seed,
        "ratio": result.ratio,
        "probe_train": [f.index for f in result.probe_train],
        "probe_test": [f.index for f in result.probe_test],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
