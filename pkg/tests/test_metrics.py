import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainit.errors import CapabilityError
from brainit.metrics import (EXTRA_COLUMNS, TABLE_COLUMNS, EmbeddingExtractorSpec, MetricReport,
                             correlation_distance, correlation_distance_from_features, evaluate, get_extractor,
                             kway_from_features, kway_retrieval, perceptual_distance, pixcorr, ssim_color, ssim_gray,
                             toy_perceptual_stack, two_way_from_features, two_way_identification)
from oracles import two_way_brute


def _imgs(rng, n=4, size=16):
    return rng.uniform(size=(n, size, size, 3))


# ---------------------------------------------------------------- pixel metrics

def test_pixel_identity_cases_exact(rng):
    x = _imgs(rng)
    assert pixcorr(x, x) == 1.0
    assert ssim_gray(x, x) == 1.0
    assert ssim_color(x, x) == 1.0


def test_pixcorr_negation_and_symmetry(rng):
    x, y = _imgs(rng), _imgs(rng)
    assert abs(pixcorr(1 - x, x) + 1.0) < 1e-12
    assert abs(pixcorr(x, y) - pixcorr(y, x)) < 1e-12


def test_pixcorr_matches_numpy(rng):
    x, y = _imgs(rng, 3), _imgs(rng, 3)
    ref = np.mean([np.corrcoef(a.ravel(), b.ravel())[0, 1] for a, b in zip(x, y)])
    assert abs(pixcorr(x, y) - ref) < 1e-12


def test_pixcorr_constant_image_warns_and_is_zero(rng):
    with pytest.warns(RuntimeWarning):
        assert pixcorr(np.full((1, 8, 8, 3), 0.4), _imgs(rng, 1, 8)) == 0.0


def test_resolution_harmonized(rng):
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    recon = np.stack([xx, yy, xx * yy], -1)[None]
    gt = recon[:, ::2, ::2]
    assert pixcorr(recon, gt) > 0.99
    with pytest.raises(ValueError):
        pixcorr(np.concatenate([gt, gt]), gt)


def test_ssim_matches_reference_formula_on_constant_windows():
    # for constant images SSIM reduces to the luminance term (2ab + C1) / (a^2 + b^2 + C1)
    a, b = 0.3, 0.6
    c1 = (0.01 * 1.0) ** 2
    ref = (2 * a * b + c1) / (a * a + b * b + c1)
    got = ssim_color(np.full((1, 16, 16, 3), a), np.full((1, 16, 16, 3), b))
    assert abs(got - ref) < 1e-10


# ---------------------------------------------------------------- identification

def test_two_way_equals_brute_force_100_instances():
    for seed in range(100):
        r = np.random.default_rng(seed)
        n, d = r.integers(2, 12), r.integers(2, 10)
        a, b = r.normal(size=(n, d)), r.normal(size=(n, d))
        if seed % 5 == 0:  # exact ties: duplicate ground-truth rows (d = 2 ties everywhere)
            b[1] = b[0]
        assert two_way_from_features(a, b) == pytest.approx(two_way_brute(a, b), abs=1e-12)


def test_two_way_ties_count_half():
    a = np.array([[1.0, 2.0, 3.0], [3.0, 1.0, 2.0]])
    b = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    assert two_way_from_features(a, b) == 0.5


def test_two_way_perfect_features(rng):
    f = rng.normal(size=(20, 8))
    assert two_way_from_features(f, f) == 1.0
    with pytest.raises(ValueError):
        two_way_from_features(f[:1], f[:1])


def test_two_way_null_distribution():
    r = np.random.default_rng(0)
    accs = [two_way_from_features(r.normal(size=(50, 16)), r.normal(size=(50, 16))) for _ in range(10_000)]
    assert abs(np.mean(accs) - 0.5) < 0.02


def test_kway_perfect_and_random():
    r = np.random.default_rng(1)
    f = r.normal(size=(30, 5))
    assert kway_from_features(f, f, 30) == 1.0
    assert kway_from_features(f, f, 5, seed=3) == 1.0
    hits = [kway_from_features(r.normal(size=(1000, 8)), r.normal(size=(1000, 8)), 1000) for _ in range(20)]
    sd = np.sqrt(0.001 * 0.999 / 1000 / 20)
    assert abs(np.mean(hits) - 0.001) < 4 * sd
    with pytest.raises(ValueError):
        kway_from_features(f, f, 31)


def test_kway_loop_oracle(rng):
    a, b = rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
    hits = 0
    for i in range(12):
        own = np.corrcoef(a[i], b[i])[0, 1]
        hits += all(own - np.corrcoef(a[i], b[j])[0, 1] > 1e-12 for j in range(12) if j != i)
    assert kway_from_features(a, b, 12) == hits / 12


def test_correlation_distance_bounds(rng):
    f = rng.normal(size=(5, 7))
    assert abs(correlation_distance_from_features(f, f)) < 1e-12
    assert abs(correlation_distance_from_features(f, -f) - 2.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
def test_affine_invariance(seed, slope, shift):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(8, 6)), r.normal(size=(8, 6))
    scales = r.uniform(0.1, 10, size=(8, 1)) * slope
    a2 = a * scales + shift
    assert two_way_from_features(a2, b) == two_way_from_features(a, b)
    assert kway_from_features(a2, b, 8) == kway_from_features(a, b, 8)
    assert abs(correlation_distance_from_features(a2, b) - correlation_distance_from_features(a, b)) < 1e-9


def test_extractor_wrappers(rng):
    ext = EmbeddingExtractorSpec("flat", "pixels", lambda px: px.reshape(len(px), -1))
    x, y = _imgs(rng, 6), _imgs(rng, 6)
    fx, fy = x.reshape(6, -1), y.reshape(6, -1)
    assert two_way_identification(x, y, ext) == two_way_from_features(fx, fy)
    assert kway_retrieval(x, y, ext, 6) == kway_from_features(fx, fy, 6)
    assert correlation_distance(x, y, ext) == correlation_distance_from_features(fx, fy)


# ---------------------------------------------------------------- perceptual distance

def test_perceptual_identity_and_monotone_in_noise(rng):
    stack = toy_perceptual_stack()
    gt = _imgs(rng, 4, 32)
    assert perceptual_distance(gt, gt, stack) == 0.0
    noise = np.random.default_rng(9).normal(size=gt.shape)
    d = [perceptual_distance(np.clip(gt + s * noise, 0, 1), gt, stack) for s in np.linspace(0.02, 0.5, 10)]
    assert all(b > a for a, b in zip(d, d[1:]))


# ---------------------------------------------------------------- registry and suite

def test_registry():
    for name in ("Alex(2)", "Alex(5)", "Incep", "CLIP", "Eff", "SwAV"):
        ext = get_extractor("toy:" + name)
        assert ext.name == "toy:" + name
        with pytest.raises(CapabilityError):
            get_extractor(name)
    with pytest.raises(KeyError):
        get_extractor("toy:VGG")


def test_toy_extractors_deterministic(rng):
    x = _imgs(rng, 3)
    a = get_extractor("toy:Alex(2)")(x)
    b = get_extractor("toy:Alex(2)")(x)
    assert np.array_equal(a, b) and a.shape[0] == 3


def test_evaluate_suite(rng, tmp_path):
    gt = _imgs(rng, 6)
    rep = evaluate(gt, gt)
    assert list(rep.values) == TABLE_COLUMNS + EXTRA_COLUMNS
    for name in ("PixCorr", "SSIM", "SSIM-color", "Alex(2)", "Alex(5)", "Incep", "CLIP", "1000way-CLIP"):
        assert rep.values[name] == 1.0, name
    for name in ("Eff", "SwAV", "LPIPS"):
        assert abs(rep.values[name]) < 1e-12, name
    assert rep.meta["extractors"]["1000way-k"] == 6 and rep.meta["n_images"] == 6
    noisy = evaluate(np.clip(gt + 0.3 * rng.normal(size=gt.shape), 0, 1), gt)
    for v in noisy.values.values():
        assert -1 <= v <= 2
    rep.save(tmp_path / "r.json")
    back = MetricReport.load(tmp_path / "r.json")
    assert back.values == rep.values and json.loads(rep.to_json())["meta"]["n_images"] == 6
    with pytest.raises(KeyError):
        evaluate(gt, gt, metrics=["FID"])
    with pytest.raises(CapabilityError):
        evaluate(gt, gt, metrics=["LPIPS"], toy=False)
