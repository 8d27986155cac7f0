"""Reconstruction metrics with pluggable feature extractors."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from skimage.color import rgb2gray
from skimage.metrics import structural_similarity

from .errors import CapabilityError
from .features import ToyConvExtractor, ToySemanticBackbone, to_tensor

TABLE_COLUMNS = ["PixCorr", "SSIM", "Alex(2)", "Alex(5)", "Incep", "CLIP", "Eff", "SwAV"]
EXTRA_COLUMNS = ["SSIM-color", "1000way-CLIP", "LPIPS"]
# higher is better for everything except these
LOWER_IS_BETTER = {"Eff", "SwAV", "LPIPS"}
# correlations closer than this count as tied (rounding differs between equivalent formulas)
TIE_TOL = 1e-12


def _pixels(images) -> np.ndarray:
    """ImageRecords / arrays -> float64 (N, H, W, 3)."""
    if isinstance(images, np.ndarray) and images.ndim == 4:
        return images.astype(np.float64)
    if isinstance(images, np.ndarray) and images.ndim == 3:
        return images[None].astype(np.float64)
    if hasattr(images, "pixels"):
        return np.asarray(images.pixels, np.float64)[None]
    return np.stack([np.asarray(getattr(im, "pixels", im), np.float64) for im in images])


def _harmonize(recon, gt):
    r, g = _pixels(recon), _pixels(gt)
    if len(r) != len(g):
        raise ValueError(f"{len(r)} reconstructions vs {len(g)} ground-truth images")
    if r.shape[1:] != g.shape[1:]:
        r = to_tensor(r, g.shape[1], torch.float64).permute(0, 2, 3, 1).numpy()
    return r, g


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if np.all(a == a[0]) or np.all(b == b[0]):
        warnings.warn("zero-variance image in pixcorr; defined as 0", RuntimeWarning, stacklevel=3)
        return 0.0
    a = a - a.mean()
    b = b - b.mean()
    return float(np.clip(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)), -1.0, 1.0))


def pixcorr(recon, gt) -> float:
    """Pearson correlation of flattened pixels, averaged over image pairs."""
    r, g = _harmonize(recon, gt)
    return float(np.mean([_pearson(a.ravel(), b.ravel()) for a, b in zip(r, g)]))


def _ssim(a, b, channel_axis=None):
    return structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, channel_axis=channel_axis)


def ssim_gray(recon, gt) -> float:
    r, g = _harmonize(recon, gt)
    return float(np.mean([_ssim(rgb2gray(a), rgb2gray(b)) for a, b in zip(r, g)]))


def ssim_color(recon, gt) -> float:
    r, g = _harmonize(recon, gt)
    return float(np.mean([_ssim(a, b, channel_axis=-1) for a, b in zip(r, g)]))


# ---------------------------------------------------------------------------
# feature-based metrics


def _standardize(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, np.float64).reshape(len(f), -1)
    f = f - f.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.where(norm == 0, 1.0, norm)


def correlation_matrix(a, b) -> np.ndarray:
    """C[i, j] = Pearson corr(a_i, b_j)."""
    return _standardize(a) @ _standardize(b).T


def two_way_from_features(recon_feats, gt_feats) -> float:
    n = len(recon_feats)
    if n < 2:
        raise ValueError("two-way identification needs at least 2 pairs")
    c = correlation_matrix(recon_feats, gt_feats)
    diff = np.diag(c)[:, None] - c
    score = (diff > TIE_TOL) + 0.5 * (np.abs(diff) <= TIE_TOL)
    np.fill_diagonal(score, 0)
    return float(score.sum() / (n * (n - 1)))


def kway_from_features(recon_feats, gt_feats, k: int, seed: int = 0) -> float:
    """Fraction of recons whose own gt strictly beats k-1 random distractors."""
    n = len(recon_feats)
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k ({k}) <= n ({n})")
    c = correlation_matrix(recon_feats, gt_feats)
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n):
        others = np.delete(np.arange(n), i)
        pick = others if k == n else rng.choice(others, size=k - 1, replace=False)
        hits += bool(np.all(c[i, i] - c[i, pick] > TIE_TOL))
    return hits / n


def correlation_distance_from_features(recon_feats, gt_feats) -> float:
    a, b = _standardize(recon_feats), _standardize(gt_feats)
    return float(np.mean(1.0 - np.clip((a * b).sum(1), -1.0, 1.0)))


@dataclass
class EmbeddingExtractorSpec:
    name: str
    layer: str
    fn: Callable  # (N, H, W, 3) float64 -> (N, D)

    def __call__(self, images) -> np.ndarray:
        return np.asarray(self.fn(_pixels(images)), np.float64).reshape(len(_pixels(images)), -1)


def two_way_identification(recons, gts, extractor: EmbeddingExtractorSpec) -> float:
    return two_way_from_features(extractor(recons), extractor(gts))


def kway_retrieval(recons, gts, extractor: EmbeddingExtractorSpec, k: int, seed: int = 0) -> float:
    return kway_from_features(extractor(recons), extractor(gts), k, seed)


def correlation_distance(recons, gts, extractor: EmbeddingExtractorSpec) -> float:
    return correlation_distance_from_features(extractor(recons), extractor(gts))


@dataclass
class PerceptualStack:
    """Feature maps per layer plus one calibration weight per layer."""
    maps: Callable  # (N, H, W, 3) -> list of (N, C, h, w) tensors
    weights: list


def perceptual_distance(recons, gts, stack: PerceptualStack) -> float:
    """Channel-normalized squared map difference, spatially averaged, weighted over layers."""
    r, g = _harmonize(recons, gts)
    total = np.zeros(len(r))
    for fr, fg, w in zip(stack.maps(r), stack.maps(g), stack.weights):
        nr = fr / (fr.norm(dim=1, keepdim=True) + 1e-10)
        ng = fg / (fg.norm(dim=1, keepdim=True) + 1e-10)
        total += w * ((nr - ng) ** 2).sum(1).mean((1, 2)).double().numpy()
    return float(total.mean())


# ---------------------------------------------------------------------------
# extractor registry: table column names map to pretrained adapters, toy: names to
# seeded random networks that need no downloads


def _conv_maps(net):
    def run(px):
        with torch.no_grad():
            return net(to_tensor(px, net.input_size, torch.float64))
    return run


def _layer(net, i, pool=None):
    maps = _conv_maps(net)

    def fn(px):
        m = maps(px)[i]
        if pool:
            m = torch.nn.functional.adaptive_avg_pool2d(m, pool)
        return m.flatten(1).numpy()
    return fn


def _toy_registry(seed: int = 0) -> dict[str, EmbeddingExtractorSpec]:
    alex = ToyConvExtractor((8, 16, 16, 16, 16), 32, seed + 11, torch.float64)
    incep = ToyConvExtractor((8, 16, 32, 32, 32), 32, seed + 12, torch.float64)
    eff = ToyConvExtractor((8, 16, 32, 32, 32), 32, seed + 13, torch.float64)
    swav = ToyConvExtractor((8, 16, 32, 32, 32), 32, seed + 14, torch.float64)
    clip = ToySemanticBackbone(seed=seed).double()

    def clip_fn(px):
        with torch.no_grad():
            return clip(to_tensor(px, clip.input_size, torch.float64)).flatten(1).numpy()

    return {
        "toy:Alex(2)": EmbeddingExtractorSpec("toy:Alex(2)", "stage2", _layer(alex, 1)),
        "toy:Alex(5)": EmbeddingExtractorSpec("toy:Alex(5)", "stage5", _layer(alex, 4)),
        "toy:Incep": EmbeddingExtractorSpec("toy:Incep", "stage4-pool", _layer(incep, 3, 1)),
        "toy:CLIP": EmbeddingExtractorSpec("toy:CLIP", "tokens", clip_fn),
        "toy:Eff": EmbeddingExtractorSpec("toy:Eff", "stage5-pool", _layer(eff, 4, 1)),
        "toy:SwAV": EmbeddingExtractorSpec("toy:SwAV", "stage4-pool", _layer(swav, 3, 1)),
    }


# layer tags of the pretrained adapters (torchvision AlexNet feature indices)
PRETRAINED_LAYERS = {"Alex(2)": "features.4", "Alex(5)": "features.11", "Incep": "avgpool",
                     "CLIP": "image_embeds", "Eff": "avgpool", "SwAV": "avgpool"}


def get_extractor(name: str, seed: int = 0) -> EmbeddingExtractorSpec:
    if name.startswith("toy:"):
        reg = _toy_registry(seed)
        if name not in reg:
            raise KeyError(f"unknown extractor {name}; have {sorted(reg)}")
        return reg[name]
    if name in PRETRAINED_LAYERS:
        raise CapabilityError(f"{name} needs pretrained weights ({PRETRAINED_LAYERS[name]}); use toy:{name}")
    raise KeyError(f"unknown extractor {name}")


def toy_perceptual_stack(seed: int = 0) -> PerceptualStack:
    net = ToyConvExtractor((8, 16, 16, 16, 16), 32, seed + 11, torch.float64)
    return PerceptualStack(_conv_maps(net), [1.0 / 5] * 5)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"metrics": self.values, "meta": self.meta}, indent=1, sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["metrics"], d["meta"])


def evaluate(recons, gts, metrics="all", toy: bool = True, seed: int = 0) -> MetricReport:
    """Table-style metric suite; ``metrics`` is "all" or a list of column names."""
    wanted = TABLE_COLUMNS + EXTRA_COLUMNS if metrics == "all" else list(metrics)
    unknown = set(wanted) - set(TABLE_COLUMNS + EXTRA_COLUMNS)
    if unknown:
        raise KeyError(f"unknown metrics {sorted(unknown)}")
    r, g = _harmonize(recons, gts)
    prefix = "toy:" if toy else ""
    out, extractors = {}, {}
    for name in wanted:
        if name == "PixCorr":
            out[name] = pixcorr(r, g)
        elif name == "SSIM":
            out[name] = ssim_gray(r, g)
        elif name == "SSIM-color":
            out[name] = ssim_color(r, g)
        elif name == "LPIPS":
            if not toy:
                raise CapabilityError("LPIPS needs pretrained AlexNet weights; use toy mode")
            out[name] = perceptual_distance(r, g, toy_perceptual_stack(seed))
        else:
            ext_name = prefix + ("CLIP" if name == "1000way-CLIP" else name)
            ext = get_extractor(ext_name, seed)
            extractors[name] = ext_name
            if name == "1000way-CLIP":
                k = min(1000, len(r))
                out[name] = kway_retrieval(r, g, ext, k, seed)
                extractors["1000way-k"] = k
            elif name in LOWER_IS_BETTER:
                out[name] = correlation_distance(r, g, ext)
            else:
                out[name] = two_way_identification(r, g, ext)
    return MetricReport(out, {"n_images": len(r), "extractors": extractors, "seed": seed})
