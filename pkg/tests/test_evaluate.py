import csv
import json

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from egoclust.checkpoint import CheckpointError
from egoclust.data import Frame, ImageSequence, SyntheticSpec, generate_synthetic
from egoclust.encoder import Encoder, EncoderConfig
from egoclust.evaluate import (
    FeatureSet,
    ProbeConfig,
    ProbeResult,
    cluster_metrics,
    extract_features,
    linear_probe,
    pca_project,
    probe_from_images,
    read_features_csv,
    write_features_csv,
    write_metrics_json,
    write_projection_csv,
)
from egoclust.imaging import Image
from egoclust.mae import DecoderConfig
from egoclust.train import CmNet, load_encoder

TINY = EncoderConfig(
    image_size=(8, 8), patch=4, dim=8, depth=1, heads=2, mlp_ratio=2.0, mask_rate=0.5
)


def tiny_sequence(seed=3):
    spec = SyntheticSpec(
        events=2, frames_per_event=(4, 4), size=(8, 8), jitter=0.02, separation=0.45
    )
    return generate_synthetic(spec, seed=seed)


# ---------------------------------------------------------------------------
# feature containers and extraction


def test_feature_set_validation():
    with pytest.raises(ValueError, match="finite"):
        FeatureSet(np.array([[1.0, np.nan]]), np.array([0]))
    with pytest.raises(ValueError, match="index"):
        FeatureSet(np.zeros((3, 2)), np.arange(2))
    with pytest.raises(ValueError, match="label"):
        FeatureSet(np.zeros((3, 2)), np.arange(3), np.array([0, 1]))
    with pytest.raises(ValueError, match="2-D"):
        FeatureSet(np.zeros(3), np.arange(3))


def test_extract_features_shape_and_labels(rng):
    seq = tiny_sequence()
    enc = Encoder(TINY, rng)
    fs = extract_features(seq, enc)
    assert fs.matrix.shape == (len(seq.frames), TINY.dim)
    assert np.array_equal(fs.labels, seq.labels())
    assert np.array_equal(fs.indices, [f.index for f in seq.frames])


def test_extract_features_identical_frames_identical_rows(rng):
    img = Image(rng.random((3, 8, 8), dtype=np.float32))
    other = Image(rng.random((3, 8, 8), dtype=np.float32))
    seq = ImageSequence([Frame(img, 0), Frame(other, 1), Frame(img, 2)])
    fs = extract_features(seq, Encoder(TINY, rng))
    assert np.array_equal(fs.matrix[0], fs.matrix[2])
    assert not np.array_equal(fs.matrix[0], fs.matrix[1])
    assert fs.labels is None


def test_extract_features_repeatable(rng):
    seq = tiny_sequence()
    enc = Encoder(TINY, rng)
    a = extract_features(seq, enc)
    b = extract_features(seq, enc)
    assert np.array_equal(a.matrix, b.matrix)


def test_load_encoder_round_trip(rng, tmp_path):
    net = CmNet(TINY, DecoderConfig(dim=8, depth=1, heads=2), seed=5, channels=4)
    path = tmp_path / "net.ckpt"
    net.save(path)
    enc = load_encoder(TINY, path)
    img = Image(rng.random((3, 8, 8), dtype=np.float32))
    assert np.array_equal(enc.encode_full(img).data, net.encoder.encode_full(img).data)

    deeper = EncoderConfig(
        image_size=(8, 8), patch=4, dim=8, depth=2, heads=2, mlp_ratio=2.0, mask_rate=0.5
    )
    with pytest.raises(CheckpointError, match="missing"):
        load_encoder(deeper, path)


# ---------------------------------------------------------------------------
# linear probe


def one_hot_features(labels, k):
    m = np.eye(k)[labels]
    return FeatureSet(m, np.arange(len(labels)), np.asarray(labels))


def test_probe_separates_one_hot_features():
    labels = np.repeat([0, 1, 2], 10)
    fs = one_hot_features(labels, 3)
    res = linear_probe(fs, fs, ProbeConfig(epochs=10))
    assert res.top1 == 1.0
    assert all(v == 1.0 for v in res.per_class.values())
    assert np.array_equal(res.confusion, np.diag([10, 10, 10]))


def test_probe_beats_majority_floor_on_train_split(rng):
    centers = rng.standard_normal((3, 6)) * 3.0
    labels = np.repeat([0, 1, 2], [20, 12, 8])
    x = centers[labels] + 0.3 * rng.standard_normal((40, 6))
    fs = FeatureSet(x, np.arange(40), labels)
    res = linear_probe(fs, fs, ProbeConfig(epochs=20))
    majority = 20 / 40
    assert res.top1 >= majority


def test_probe_chance_level_with_shuffled_labels():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng([seed, 42])
        train = FeatureSet(rng.standard_normal((100, 8)), np.arange(100), rng.integers(0, 5, 100))
        test = FeatureSet(rng.standard_normal((50, 8)), np.arange(50), rng.integers(0, 5, 50))
        accs.append(linear_probe(train, test, ProbeConfig(seed=seed)).top1)
    assert abs(float(np.mean(accs)) - 0.2) <= 0.1


def test_probe_confusion_rows_sum_to_supports(rng):
    train = FeatureSet(rng.standard_normal((60, 4)), np.arange(60), rng.integers(0, 3, 60))
    test_labels = rng.integers(0, 3, 30)
    test = FeatureSet(rng.standard_normal((30, 4)), np.arange(30), test_labels)
    res = linear_probe(train, test, ProbeConfig(epochs=5))
    supports = np.array([(test_labels == c).sum() for c in res.classes])
    assert np.array_equal(res.confusion.sum(axis=1), supports)
    assert res.top1 == pytest.approx(np.trace(res.confusion) / 30)


def test_probe_rejects_degenerate_inputs(rng):
    x = rng.standard_normal((10, 4))
    single = FeatureSet(x, np.arange(10), np.zeros(10, dtype=int))
    mixed = FeatureSet(x, np.arange(10), np.arange(10) % 2)
    with pytest.raises(ValueError, match="single class"):
        linear_probe(single, mixed)
    unseen = FeatureSet(x, np.arange(10), np.full(10, 7))
    with pytest.raises(ValueError, match="never appear"):
        linear_probe(mixed, unseen)
    with pytest.raises(ValueError, match="labeled"):
        linear_probe(FeatureSet(x, np.arange(10)), mixed)


def test_probe_result_validation():
    with pytest.raises(ValueError, match="top1"):
        ProbeResult(top1=1.5, per_class={}, confusion=np.zeros((2, 2), int), classes=[0, 1])
    with pytest.raises(ValueError, match="square"):
        ProbeResult(top1=0.5, per_class={}, confusion=np.zeros((2, 3), int), classes=[0, 1])


def test_probe_from_images_runs_and_is_deterministic(rng):
    seq = tiny_sequence()
    enc = Encoder(TINY, rng)
    cfg = ProbeConfig(epochs=2, seed=9)
    first = probe_from_images(seq, seq, enc, cfg)
    second = probe_from_images(seq, seq, enc, cfg)
    assert 0.0 <= first.top1 <= 1.0
    assert first.top1 == second.top1
    assert np.array_equal(first.confusion, second.confusion)


# ---------------------------------------------------------------------------
# clustering metrics


def test_metrics_invariant_under_relabeling():
    true = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([7, 7, 3, 3, 9, 9])
    out = cluster_metrics(pred, true)
    assert out == {"ari": 1.0, "nmi": 1.0, "purity": 1.0}


def test_metrics_one_cluster_balanced():
    true = np.repeat([0, 1, 2], 5)
    pred = np.zeros(15, dtype=int)
    out = cluster_metrics(pred, true)
    assert out["purity"] == pytest.approx(1 / 3)
    assert out["ari"] == 0.0
    assert out["nmi"] == 0.0


def test_metrics_degenerate_single_cluster_both_sides():
    out = cluster_metrics(np.zeros(4, int), np.full(4, 5))
    assert out == {"ari": 1.0, "nmi": 1.0, "purity": 1.0}


def purity_oracle(pred, true):
    total = 0
    for cluster in np.unique(pred):
        members = true[pred == cluster]
        counts = [np.sum(members == c) for c in np.unique(members)]
        total += max(counts)
    return total / len(true)


def test_metrics_match_reference_implementations():
    rng = np.random.default_rng(17)
    for _ in range(20):
        n = 100
        true = rng.integers(0, rng.integers(2, 7), n)
        pred = rng.integers(0, rng.integers(2, 7), n)
        out = cluster_metrics(pred, true)
        assert out["ari"] == pytest.approx(adjusted_rand_score(true, pred), abs=1e-9)
        ref_nmi = normalized_mutual_info_score(true, pred, average_method="arithmetic")
        assert out["nmi"] == pytest.approx(ref_nmi, abs=1e-9)
        assert out["purity"] == pytest.approx(purity_oracle(pred, true), abs=1e-12)


def test_metrics_relabel_property():
    rng = np.random.default_rng(8)
    for seed in range(5):
        true = rng.integers(0, 4, 60)
        pred = rng.integers(0, 4, 60)
        perm = rng.permutation(4)
        base = cluster_metrics(pred, true)
        mapped = cluster_metrics(perm[pred], true)
        for key in base:
            assert base[key] == pytest.approx(mapped[key], abs=1e-12)


def test_metrics_input_validation():
    with pytest.raises(ValueError, match="empty"):
        cluster_metrics(np.array([]), np.array([]))
    with pytest.raises(ValueError, match="shape"):
        cluster_metrics(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# PCA


def test_pca_collinear_data_single_component(rng):
    direction = rng.standard_normal(5)
    t = rng.standard_normal(30)
    x = np.outer(t, direction) + 2.0
    proj = pca_project(x, dims=2)
    total = proj.variances.sum()
    assert proj.variances[0] / total >= 1.0 - 1e-6
    assert proj.variances[1] <= 1e-10 * proj.variances[0]


def test_pca_components_orthonormal(rng):
    x = rng.standard_normal((40, 6))
    proj = pca_project(x, dims=4)
    gram = proj.components @ proj.components.T
    np.testing.assert_allclose(gram, np.eye(4), atol=1e-8)


def test_pca_reconstruction_error_matches_discarded_eigenvalues(rng):
    x = rng.standard_normal((40, 6)) @ np.diag([3.0, 2.0, 1.5, 1.0, 0.5, 0.1])
    proj = pca_project(x, dims=2)
    recon = proj.mean + proj.coords @ proj.components
    err = ((x - recon) ** 2).sum() / (len(x) - 1)

    centered = x - x.mean(axis=0)
    eigvals = np.linalg.eigvalsh(centered.T @ centered / (len(x) - 1))
    discarded = np.sort(eigvals)[::-1][2:].sum()
    assert err == pytest.approx(discarded, abs=1e-6)


def test_pca_variances_match_coordinate_spread(rng):
    x = rng.standard_normal((50, 5))
    proj = pca_project(x, dims=3)
    spread = proj.coords.var(axis=0, ddof=1)
    np.testing.assert_allclose(spread, proj.variances, rtol=1e-8)
    assert np.all(np.diff(proj.variances) <= 1e-12)


def test_pca_sign_rule_and_determinism(rng):
    x = rng.standard_normal((25, 4))
    a = pca_project(x, dims=4)
    b = pca_project(x, dims=4)
    for row in a.components:
        assert row[np.argmax(np.abs(row))] > 0
    assert np.array_equal(a.coords, b.coords)
    assert np.array_equal(a.components, b.components)


def test_pca_input_validation(rng):
    with pytest.raises(ValueError, match="dims"):
        pca_project(rng.standard_normal((10, 3)), dims=4)
    with pytest.raises(ValueError, match="dims"):
        pca_project(rng.standard_normal((10, 3)), dims=0)
    with pytest.raises(ValueError, match="rows"):
        pca_project(rng.standard_normal((1, 3)), dims=1)


# ---------------------------------------------------------------------------
# exports


def test_features_csv_round_trip(rng, tmp_path):
    fs = FeatureSet(rng.standard_normal((6, 3)), np.arange(10, 16))
    path = tmp_path / "features.csv"
    write_features_csv(fs, path)
    back = read_features_csv(path)
    assert np.array_equal(back.indices, fs.indices)
    np.testing.assert_array_equal(back.matrix, fs.matrix)
    with pytest.raises(ValueError, match="feature table"):
        path2 = tmp_path / "bad.csv"
        path2.write_text("a,b\n1,2\n")
        read_features_csv(path2)


def test_projection_csv_layout(rng, tmp_path):
    fs = FeatureSet(rng.standard_normal((5, 4)), np.arange(5), np.array([0, 0, 1, 1, 1]))
    proj = pca_project(fs, dims=2)
    path = tmp_path / "proj.csv"
    write_projection_csv(fs, proj, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["frame_index", "x", "y", "event_id"]
    assert len(rows) == 6
    assert [r[3] for r in rows[1:]] == ["0", "0", "1", "1", "1"]
    assert float(rows[1][1]) == proj.coords[0, 0]


def test_metrics_json(tmp_path):
    path = tmp_path / "metrics.json"
    write_metrics_json({"ari": 0.5, "nmi": 0.25, "purity": 0.75, "top1": 0.9}, path)
    assert json.loads(path.read_text()) == {"ari": 0.5, "nmi": 0.25, "purity": 0.75, "top1": 0.9}
