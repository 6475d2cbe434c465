import itertools
import json

import numpy as np
import pytest

from egoclust.data import Frame, ImageSequence, SyntheticSpec, generate_synthetic
from egoclust.events import (
    AlignmentReport,
    ClusterManifest,
    EventSpan,
    SegmentationParams,
    align_to_ground_truth,
    boundary_scores,
    read_manifest,
    segment_events,
    smooth_embeddings,
    write_alignment_json,
    write_manifest,
)
from egoclust.imaging import Image


def manifest_from_events(events, dim=3):
    events = np.asarray(events)
    table = []
    starts = np.flatnonzero(np.r_[True, np.diff(events) != 0])
    ends = np.r_[starts[1:], len(events)] - 1
    for k, (a, b) in enumerate(zip(starts, ends)):
        table.append(EventSpan(id=k, start=int(a), end=int(b), centroid=np.zeros(dim)))
    return ClusterManifest(np.arange(len(events)), events, table)


def labeled_sequence(labels, rng):
    frames = [
        Frame(Image(rng.random((3, 4, 4), dtype=np.float32)), i, event=int(lab))
        for i, lab in enumerate(labels)
    ]
    return ImageSequence(frames)


# ---------------------------------------------------------------------------
# parameters and phases


@pytest.mark.parametrize(
    "kw",
    [
        {"window": 0},
        {"theta": -0.1},
        {"theta": 2.1},
        {"merge_theta": 2.5},
        {"min_length": 0},
    ],
)
def test_params_validation(kw):
    with pytest.raises(ValueError):
        SegmentationParams(**kw)


def test_smoothing_window_is_a_local_mean(rng):
    x = rng.standard_normal((6, 2))
    rows = smooth_embeddings(x, window=1)  # window 1: just center and normalize
    sm = smooth_embeddings(x, window=3)
    assert sm.shape == x.shape
    np.testing.assert_allclose(sm[3], rows[2:5].mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(sm[0], rows[0:2].mean(axis=0), atol=1e-12)  # clipped


def test_boundary_scores_flat_inputs_are_zero():
    sm = np.tile([0.5, 0.5], (8, 1))
    assert boundary_scores(sm, window=5).shape == (7,)
    assert np.all(np.abs(boundary_scores(sm, window=5)) <= 1e-12)


# ---------------------------------------------------------------------------
# segmentation


def test_constant_embeddings_one_event():
    out = segment_events(np.ones((20, 4)))
    assert out.n_events == 1
    assert np.all(out.events == 0)
    assert out.table[0].start == 0 and out.table[0].end == 19

    strict = segment_events(np.ones((20, 4)), SegmentationParams(theta=0.0))
    assert strict.n_events == 1


def test_two_orthogonal_blocks_split_exactly():
    u = np.array([1.0, 0.0, 0.0, 0.0])
    v = np.array([0.0, 1.0, 0.0, 0.0])
    x = np.concatenate([np.tile(u, (20, 1)), np.tile(v, (20, 1))])
    out = segment_events(x)
    assert out.n_events == 2
    # a straddle of tied cut scores around the transition resolves to a
    # boundary within half a smoothing window of the truth
    assert abs(int(np.argmax(out.events == 1)) - 20) <= 3


def test_generator_blocks_boundary_near_truth():
    spec = SyntheticSpec(
        events=2, frames_per_event=(20, 20), size=(8, 8), jitter=0.02, separation=0.45
    )
    seq = generate_synthetic(spec, seed=5)
    pixels = np.stack([f.image.data.ravel().astype(np.float64) for f in seq.frames])
    out = segment_events(pixels)
    assert out.n_events == 2
    boundary = int(np.argmax(out.events == 1))
    assert abs(boundary - 20) <= 3  # half the smoothing window, rounded up


def test_theta_max_gives_single_event(rng):
    x = rng.standard_normal((30, 5))
    out = segment_events(x, SegmentationParams(theta=2.0))
    assert out.n_events == 1


def test_merge_phase_heals_oversegmentation(rng):
    dirs = np.eye(6)[:3]
    x = np.repeat(dirs, 10, axis=0) + 0.01 * rng.standard_normal((30, 6))
    params = SegmentationParams(window=1, theta=0.0, merge_theta=0.3, min_length=1)
    out = segment_events(x, params)
    assert out.n_events == 3
    assert np.array_equal(out.events, np.repeat([0, 1, 2], 10))


def test_min_length_tie_breaks_toward_earlier_boundary():
    u = np.array([2.0, 0.0])
    v = np.array([0.0, 2.0])
    x = np.stack([u, u, v, v, u, u, u])
    params = SegmentationParams(window=1, theta=0.3, merge_theta=0.0, min_length=3)
    out = segment_events(x, params)
    # cuts fire at positions 2 and 4 with identical strength; dropping the
    # earlier one leaves runs of 4 and 3, dropping the later would cascade
    # down to a single run
    assert out.n_events == 2
    assert np.array_equal(out.events, [0, 0, 0, 0, 1, 1, 1])


def test_decreasing_theta_never_decreases_premerge_segments(rng):
    for _ in range(50):
        n = int(rng.integers(4, 25))
        x = rng.standard_normal((n, 4))
        lmin = int(rng.integers(1, 4))
        counts = []
        for theta in sorted(rng.uniform(0.0, 2.0, 5), reverse=True):
            params = SegmentationParams(theta=float(theta), merge_theta=0.0, min_length=lmin)
            counts.append(segment_events(x, params).n_events)
        assert all(a <= b for a, b in zip(counts, counts[1:])), counts


def test_segmentation_is_deterministic(rng):
    x = rng.standard_normal((40, 6))
    assert segment_events(x) == segment_events(x)


def test_segmentation_output_structure(rng):
    for seed in range(5):
        r = np.random.default_rng(seed)
        x = r.standard_normal((int(r.integers(5, 40)), 4))
        out = segment_events(x, SegmentationParams(theta=float(r.uniform(0, 1))))
        assert np.array_equal(np.unique(out.events), np.arange(out.n_events))
        for k, span in enumerate(out.table):
            members = np.flatnonzero(out.events == k)
            assert np.array_equal(members, np.arange(members[0], members[-1] + 1))
            assert span.start == members[0] and span.end == members[-1]


def test_segmentation_input_validation(rng):
    with pytest.raises(ValueError, match="nonempty"):
        segment_events(np.zeros((0, 4)))
    with pytest.raises(ValueError, match="min_length"):
        segment_events(rng.standard_normal((4, 3)), SegmentationParams(min_length=5))


# ---------------------------------------------------------------------------
# manifest container and files


def test_manifest_rejects_split_runs():
    with pytest.raises(ValueError, match="contiguous runs"):
        manifest_from_events([0, 0, 1, 1, 0, 0])


def test_manifest_rejects_sparse_ids():
    events = np.array([0, 0, 2, 2])
    table = [
        EventSpan(0, 0, 1, np.zeros(2)),
        EventSpan(2, 2, 3, np.zeros(2)),
    ]
    with pytest.raises(ValueError, match="numbered"):
        ClusterManifest(np.arange(4), events, table)


def test_manifest_rejects_bad_table():
    events = np.array([0, 0, 1, 1])
    good = [EventSpan(0, 0, 1, np.zeros(2)), EventSpan(1, 2, 3, np.zeros(2))]
    ClusterManifest(np.arange(4), events, good)
    with pytest.raises(ValueError, match="table"):
        ClusterManifest(np.arange(4), events, good[:1])
    with pytest.raises(ValueError, match="span"):
        bad_span = [EventSpan(0, 0, 2, np.zeros(2)), EventSpan(1, 2, 3, np.zeros(2))]
        ClusterManifest(np.arange(4), events, bad_span)
    with pytest.raises(ValueError, match="finite"):
        bad_c = [EventSpan(0, 0, 1, np.array([np.nan, 0.0])), EventSpan(1, 2, 3, np.zeros(2))]
        ClusterManifest(np.arange(4), events, bad_c)
    with pytest.raises(ValueError, match="increasing"):
        ClusterManifest(np.array([0, 0, 1, 2]), events, good)


def test_manifest_round_trip_bit_exact(rng, tmp_path):
    x = rng.standard_normal((25, 5))
    manifest = segment_events(x, SegmentationParams(theta=0.5))
    path = tmp_path / "events.jsonl"
    write_manifest(manifest, path)
    assert read_manifest(path) == manifest


def test_manifest_read_errors(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        read_manifest(path)

    path.write_text('{"frame": 0, "event": 0}\nnot json\n')
    with pytest.raises(ValueError, match=":2:"):
        read_manifest(path)

    path.write_text('{"frame": 0}\n')
    with pytest.raises(ValueError, match="frame"):
        read_manifest(path)


def test_manifest_read_rejects_overlap(rng, tmp_path):
    manifest = manifest_from_events([0, 0, 0, 1, 1, 1])
    path = tmp_path / "m.jsonl"
    write_manifest(manifest, path)
    lines = path.read_text().splitlines()
    lines[5] = json.dumps({"frame": 5, "event": 0})  # reopens event 0
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="contiguous runs"):
        read_manifest(path)


def test_manifest_read_requires_sidecar(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"frame": 0, "event": 0}\n')
    with pytest.raises(ValueError, match="sidecar"):
        read_manifest(tmp_path / "m.jsonl")


# ---------------------------------------------------------------------------
# ground-truth alignment


def test_alignment_perfect(rng):
    labels = np.repeat([4, 7, 9], 5)
    seq = labeled_sequence(labels, rng)
    manifest = manifest_from_events(np.repeat([0, 1, 2], 5))
    report = align_to_ground_truth(manifest, seq)
    assert report.agreement == 1.0
    assert report.misaligned == []
    assert report.mapping == {0: 4, 1: 7, 2: 9}
    assert report.metrics == {"ari": 1.0, "nmi": 1.0, "purity": 1.0}


def test_alignment_one_flipped_frame(rng):
    labels = np.repeat([0, 1], 6)
    seq = labeled_sequence(labels, rng)
    manifest = manifest_from_events([0] * 5 + [1] * 7)  # boundary one frame early
    report = align_to_ground_truth(manifest, seq)
    assert report.agreement == pytest.approx(11 / 12)
    assert report.misaligned == [5]


def agreement_oracle(pred, true):
    k_pred = int(pred.max()) + 1
    k_true = int(true.max()) + 1
    table = np.zeros((k_true, k_pred), dtype=int)
    np.add.at(table, (true, pred), 1)
    best = 0
    if k_pred <= k_true:
        for perm in itertools.permutations(range(k_true), k_pred):
            best = max(best, sum(table[perm[j], j] for j in range(k_pred)))
    else:
        for perm in itertools.permutations(range(k_pred), k_true):
            best = max(best, sum(table[i, perm[i]] for i in range(k_true)))
    return best / len(pred)


def random_contiguous(rng, n, k):
    cuts = np.sort(rng.choice(np.arange(1, n), size=k - 1, replace=False))
    return np.repeat(np.arange(k), np.diff(np.r_[0, cuts, n]))


def test_alignment_matches_exhaustive_oracle(rng):
    for seed in range(10):
        r = np.random.default_rng(seed)
        n = 30
        true = random_contiguous(r, n, int(r.integers(2, 5)))
        pred = random_contiguous(r, n, int(r.integers(2, 6)))
        seq = labeled_sequence(true, rng)
        report = align_to_ground_truth(manifest_from_events(pred), seq)
        assert report.agreement == pytest.approx(agreement_oracle(pred, true), abs=1e-12)


def test_alignment_input_validation(rng):
    seq = labeled_sequence(np.repeat([0, 1], 4), rng)
    with pytest.raises(ValueError, match="mismatch"):
        align_to_ground_truth(manifest_from_events([0, 0, 1, 1]), seq)
    unlabeled = ImageSequence(
        [Frame(Image(rng.random((3, 4, 4), dtype=np.float32)), i) for i in range(8)]
    )
    with pytest.raises(ValueError, match="labels"):
        align_to_ground_truth(manifest_from_events([0] * 4 + [1] * 4), unlabeled)


def test_alignment_report_json(rng, tmp_path):
    seq = labeled_sequence(np.repeat([0, 1], 5), rng)
    report = align_to_ground_truth(manifest_from_events(np.repeat([0, 1], 5)), seq)
    path = tmp_path / "alignment.json"
    write_alignment_json(report, path)
    payload = json.loads(path.read_text())
    assert payload["agreement"] == 1.0
    assert payload["misaligned"] == []
    assert payload["mapping"] == {"0": 0, "1": 1}
    assert payload["metrics"]["ari"] == 1.0
