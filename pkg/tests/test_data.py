import json

import numpy as np
import pytest
from scipy import stats

from brainit.data import (ENRICHED, LABELED, FmriSample, ImageRecord, SubjectRegistry, SyntheticConfig,
                          SyntheticEncoder, enrich_with_unlabeled, load_dataset, make_synthetic_dataset,
                          pixel_features, sample_voxels, save_dataset, split_pairs, zscore_activations)
from brainit.errors import ConfigurationError


def _sample(v, seed=0):
    return FmriSample(1, np.random.default_rng(seed).normal(size=v))


# ---------------------------------------------------------------- sample_voxels

def test_sample_voxels_full_scale_draws_with_replacement():
    idx, acts = sample_voxels(_sample(40000), 15000, seed=0)
    assert idx.shape == (15000,) and acts.shape == (15000,)
    assert len(np.unique(idx)) < 15000  # duplicates occur at this ratio


def test_sample_voxels_single_voxel():
    idx, acts = sample_voxels(FmriSample(1, [2.5]), 5, seed=3)
    assert idx.tolist() == [0] * 5
    assert np.all(acts == np.float32(2.5))


def test_sample_voxels_uniform_chi_square():
    idx, _ = sample_voxels(_sample(100), 10**6, seed=11)
    counts = np.bincount(idx, minlength=100)
    # chi-square goodness of fit against the uniform law
    chi2, p = stats.chisquare(counts)
    assert p > 0.001
    expected = 10**6 / 100
    sd = np.sqrt(10**6 * 0.01 * 0.99)
    assert np.all(np.abs(counts - expected) < 5 * sd)


def test_sample_voxels_deterministic_and_activations_match():
    s = _sample(300)
    a = sample_voxels(s, 50, seed=7)
    b = sample_voxels(s, 50, seed=7)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], s.activations[a[0]])


@pytest.mark.parametrize("n", [0, -3])
def test_sample_voxels_rejects_nonpositive(n):
    with pytest.raises(ValueError):
        sample_voxels(_sample(10), n, seed=0)


# ---------------------------------------------------------------- types

def test_sample_rejects_nan():
    with pytest.raises(ValueError):
        FmriSample(1, [0.0, np.nan])


def test_image_record_clips_and_requires_square():
    im = ImageRecord("a", np.full((4, 4, 3), 1.7))
    assert im.pixels.max() == 1.0
    with pytest.raises(ValueError):
        ImageRecord("b", np.zeros((4, 5, 3)))


def test_registry_checks_voxel_count():
    reg = SubjectRegistry({1: 3})
    reg.check(FmriSample(1, np.zeros(3)))
    with pytest.raises(ValueError):
        reg.check(FmriSample(1, np.zeros(4)))
    with pytest.raises(ConfigurationError):
        reg.check(FmriSample(2, np.zeros(3)))
    with pytest.raises(ValueError):
        SubjectRegistry({1: 0})


# ---------------------------------------------------------------- synthetic data

SMALL = SyntheticConfig(image_size=16, n_subjects=2, n_voxels=64, n_pairs=20, n_test=4, seed=5)


def test_zero_image_gives_bias():
    _, enc = make_synthetic_dataset(SyntheticConfig(noise=0.0, n_pairs=2, n_test=0, n_voxels=32))
    zero = ImageRecord("z", np.zeros((16, 16, 3)))
    for s in enc.subjects:
        np.testing.assert_array_equal(enc.predict(zero, s), enc.biases[s].astype(np.float32))


def test_synthetic_dataset_deterministic():
    p1, _ = make_synthetic_dataset(SMALL)
    p2, _ = make_synthetic_dataset(SMALL)
    assert len(p1) == len(p2) == 20 + 4 * 2
    for (s1, i1), (s2, i2) in zip(p1, p2):
        assert s1.subject_id == s2.subject_id and s1.image_id == s2.image_id
        assert np.array_equal(s1.activations, s2.activations)
        assert np.array_equal(i1.pixels, i2.pixels)


def test_noise_free_activations_equal_encoder():
    pairs, enc = make_synthetic_dataset(SyntheticConfig(noise=0.0, n_pairs=10, n_test=2, n_voxels=32))
    for s, img in pairs:
        assert np.array_equal(s.activations, enc.predict(img, s.subject_id))


def test_least_squares_recovers_linear_map():
    v = 48
    cfg = SyntheticConfig(noise=0.0, n_subjects=1, n_voxels=v, n_pairs=2 * 192 + 16, n_test=0, seed=2)
    pairs, enc = make_synthetic_dataset(cfg)
    feats = np.stack([pixel_features(img.pixels, cfg.feature_size) for _, img in pairs])
    acts = np.stack([s.activations for s, _ in pairs]).astype(np.float64)
    design = np.hstack([feats, np.ones((len(feats), 1))])
    coef, *_ = np.linalg.lstsq(design, acts, rcond=None)
    w_hat, b_hat = coef[:-1].T, coef[-1]
    truth = np.hstack([enc.weights[1], enc.biases[1][:, None]])
    est = np.hstack([w_hat, b_hat[:, None]])
    # float32 storage of activations bounds the achievable accuracy
    assert np.linalg.norm(est - truth) / np.linalg.norm(truth) < 1e-3


@pytest.mark.parametrize("field, value", [("n_voxels", 0), ("n_pairs", 0)])
def test_degenerate_config_rejected(field, value):
    with pytest.raises(ValueError):
        make_synthetic_dataset(SyntheticConfig(**{field: value}))


def test_test_split_repeats_images_across_subjects():
    pairs, _ = make_synthetic_dataset(SMALL)
    test = split_pairs(pairs, "test")
    ids = [s.image_id for s, _ in test]
    assert len(set(ids)) == 4 and len(ids) == 8


# ---------------------------------------------------------------- enrichment

class _ConstEncoder:
    subjects = [1, 2, 3, 4]

    def predict(self, image, subject_id):
        return np.full(3, subject_id, np.float32)

    def voxel_embeddings(self, subject_id):
        return np.zeros((3, 2))


def test_enrichment_one_record_per_image_per_epoch():
    img = ImageRecord("u", np.zeros((1, 1, 3)))
    images = [ImageRecord(f"u{i}", img.pixels) for i in range(120000)]
    pool = enrich_with_unlabeled(images, _ConstEncoder(), [1, 2, 3, 4], seed=0)
    recs = pool.for_epoch(0)
    assert len(recs) == 120000
    assert all(r.provenance == ENRICHED for r in recs[:100])


def test_empty_enrichment():
    pool = enrich_with_unlabeled([], _ConstEncoder(), [1, 2], seed=0)
    assert len(pool) == 0 and pool.for_epoch(3) == []


def test_enrichment_missing_subject():
    with pytest.raises(ConfigurationError):
        enrich_with_unlabeled([ImageRecord("a", np.zeros((2, 2, 3)))], _ConstEncoder(), [1, 9], seed=0)


def test_enrichment_subject_frequencies_uniform():
    images = [ImageRecord(f"u{i}", np.zeros((2, 2, 3))) for i in range(10)]
    pool = enrich_with_unlabeled(images, _ConstEncoder(), [1, 2, 3, 4], seed=5)
    n_epochs = 10**4
    counts = np.zeros((10, 4))
    for e in range(n_epochs):
        choice = pool.subject_choices(e)
        counts[np.arange(10), choice - 1] += 1
    expected = n_epochs / 4
    sd = np.sqrt(n_epochs * 0.25 * 0.75)
    assert np.all(np.abs(counts - expected) < 3.5 * sd)
    # each record carries the chosen subject's prediction
    recs = pool.for_epoch(17)
    assert all(np.all(r.activations == r.subject_id) for r in recs)


def test_enrichment_does_not_touch_labeled_pairs():
    pairs, enc = make_synthetic_dataset(SMALL)
    before = [s.activations.copy() for s, _ in pairs]
    pool = enrich_with_unlabeled([img for _, img in pairs[:5]], enc, enc.subjects, seed=0)
    pool.for_epoch(0)
    assert all(np.array_equal(b, s.activations) for b, (s, _) in zip(before, pairs))
    assert all(s.provenance == LABELED for s, _ in pairs)


# ---------------------------------------------------------------- persistence

def test_dataset_roundtrip_and_raw_layout(tmp_path):
    pairs, enc = make_synthetic_dataset(SMALL)
    save_dataset(tmp_path, pairs)
    loaded, manifest = load_dataset(tmp_path)
    assert len(loaded) == len(pairs)
    for (a, ia), (b, ib) in zip(pairs, loaded):
        assert a.subject_id == b.subject_id and a.image_id == b.image_id and a.split == b.split
        assert np.array_equal(a.activations, b.activations)
        assert np.array_equal(ia.pixels.astype(np.float32), ib.pixels)
    info = manifest["subjects"]["1"]
    raw = (tmp_path / info["file"]).read_bytes()
    assert len(raw) == info["n_samples"] * info["n_voxels"] * 4
    first = [s for s, _ in pairs if s.subject_id == 1][0]
    np.testing.assert_array_equal(np.frombuffer(raw[: 4 * info["n_voxels"]], dtype="<f4"), first.activations)
    assert json.loads((tmp_path / "manifest.json").read_text())["counts"][LABELED] == len(pairs)


def test_encoder_save_load(tmp_path):
    _, enc = make_synthetic_dataset(SMALL)
    enc.save(tmp_path / "enc.npz")
    back = SyntheticEncoder.load(tmp_path / "enc.npz")
    img = ImageRecord("x", np.random.default_rng(0).uniform(size=(16, 16, 3)))
    assert np.array_equal(back.predict(img, 2), enc.predict(img, 2))
    assert np.array_equal(back.coordinates(1), enc.coordinates(1))


def test_zscore_uses_labeled_train_statistics():
    pairs, _ = make_synthetic_dataset(SMALL)
    normed, _ = zscore_activations(pairs)
    for sid in (1, 2):
        train = np.stack([s.activations for s, _ in normed if s.subject_id == sid and s.split == "train"])
        np.testing.assert_allclose(train.mean(0), 0, atol=1e-5)
        np.testing.assert_allclose(train.std(0), 1, atol=1e-4)
