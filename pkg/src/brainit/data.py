"""fMRI/image pairs, voxel sampling, synthetic data and unlabeled-image enrichment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError

LABELED = "labeled"
ENRICHED = "enriched"


@dataclass
class FmriSample:
    subject_id: int
    activations: np.ndarray
    image_id: str | None = None
    provenance: str = LABELED
    split: str = "train"

    def __post_init__(self):
        self.activations = np.asarray(self.activations, dtype=np.float32)
        if self.activations.ndim != 1:
            raise ValueError("activations must be a vector")
        if not np.all(np.isfinite(self.activations)):
            raise ValueError("activations contain NaN/Inf")

    @property
    def n_voxels(self) -> int:
        return self.activations.shape[0]


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] != px.shape[1]:
            raise ValueError(f"expected a square HxWx3 image, got {px.shape}")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class SubjectRegistry:
    n_voxels: dict[int, int]
    voxel_indices: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for sid, v in self.n_voxels.items():
            if v <= 0:
                raise ValueError(f"subject {sid} has non-positive voxel count {v}")
            self.voxel_indices.setdefault(sid, np.arange(v))

    @property
    def subjects(self) -> list[int]:
        return sorted(self.n_voxels)

    def check(self, sample: FmriSample):
        if sample.subject_id not in self.n_voxels:
            raise ConfigurationError(f"unknown subject {sample.subject_id}")
        if sample.n_voxels != self.n_voxels[sample.subject_id]:
            raise ValueError(
                f"subject {sample.subject_id}: expected {self.n_voxels[sample.subject_id]} "
                f"voxels, got {sample.n_voxels}"
            )


class EncoderInterface(Protocol):
    """Image-to-fMRI encoder: predicted activations per subject."""

    subjects: list[int]

    def predict(self, image: ImageRecord, subject_id: int) -> np.ndarray: ...

    def voxel_embeddings(self, subject_id: int) -> np.ndarray: ...


def sample_voxels(sample: FmriSample, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` voxel indices uniformly with replacement."""
    if n <= 0:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, sample.n_voxels, size=n)
    return idx, sample.activations[idx]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    image_size: int = 16
    n_subjects: int = 2
    n_voxels: int = 512
    noise: float = 0.1
    n_pairs: int = 200
    n_test: int = 50
    feature_size: int = 8
    embed_dim: int = 32
    n_types: int = 16
    seed: int = 0

    def validate(self):
        if self.n_voxels <= 0:
            raise ValueError("n_voxels must be positive")
        if self.n_pairs <= 0:
            raise ValueError("n_pairs must be positive")
        if self.n_subjects <= 0 or self.n_test < 0 or self.noise < 0:
            raise ValueError("invalid synthetic config")
        if self.image_size % self.feature_size:
            raise ValueError("image_size must be a multiple of feature_size")


def pixel_features(pixels: np.ndarray, feature_size: int) -> np.ndarray:
    """Block-average an HxWx3 image down to feature_size^2 * 3 values."""
    h = pixels.shape[0]
    f = h // feature_size
    px = np.asarray(pixels, dtype=np.float64)
    return px.reshape(feature_size, f, feature_size, f, 3).mean(axis=(1, 3)).ravel()


class SyntheticEncoder:
    """Affine encoder: activations = W @ features(image) + b."""

    def __init__(self, weights, biases, embeddings, feature_size, coords=None):
        self.weights = {int(k): np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        self.coords = {int(k): np.asarray(v, dtype=np.float64) for k, v in (coords or {}).items()}
        self.biases = {int(k): np.asarray(v, dtype=np.float64) for k, v in biases.items()}
        self.embeddings = {int(k): np.asarray(v, dtype=np.float32) for k, v in embeddings.items()}
        self.feature_size = feature_size

    @property
    def subjects(self) -> list[int]:
        return sorted(self.weights)

    def registry(self) -> SubjectRegistry:
        return SubjectRegistry({s: self.weights[s].shape[0] for s in self.subjects})

    def predict(self, image: ImageRecord, subject_id: int) -> np.ndarray:
        if subject_id not in self.weights:
            raise ConfigurationError(f"encoder has no subject {subject_id}")
        feats = pixel_features(image.pixels, self.feature_size)
        return (self.weights[subject_id] @ feats + self.biases[subject_id]).astype(np.float32)

    def voxel_embeddings(self, subject_id: int) -> np.ndarray:
        if subject_id not in self.embeddings:
            raise ConfigurationError(f"encoder has no subject {subject_id}")
        return self.embeddings[subject_id]

    def coordinates(self, subject_id: int) -> np.ndarray:
        """Anatomical (V, 3) voxel positions; retinotopic layout plus depth."""
        if subject_id not in self.coords:
            raise ConfigurationError(f"encoder has no coordinates for subject {subject_id}")
        return self.coords[subject_id]

    def save(self, path):
        arrays = {"feature_size": np.array(self.feature_size)}
        for s in self.subjects:
            if s in self.coords:
                arrays[f"C{s}"] = self.coords[s]
            arrays[f"W{s}"] = self.weights[s]
            arrays[f"b{s}"] = self.biases[s]
            arrays[f"E{s}"] = self.embeddings[s]
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "SyntheticEncoder":
        z = np.load(path)
        subs = sorted(int(k[1:]) for k in z.files if k.startswith("W"))
        return cls(
            {s: z[f"W{s}"] for s in subs},
            {s: z[f"b{s}"] for s in subs},
            {s: z[f"E{s}"] for s in subs},
            int(z["feature_size"]),
            {s: z[f"C{s}"] for s in subs if f"C{s}" in z.files},
        )


def random_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random texture with a few flat-colored shapes on top."""
    img = np.empty((size, size, 3))
    for c in range(3):
        img[..., c] = gaussian_filter(rng.normal(size=(size, size)), sigma=size / 6, mode="wrap")
    img = 0.5 + 0.25 * img / (img.std() + 1e-8)
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0.15, 0.85, 2)
        r = rng.uniform(0.1, 0.3)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[mask] = color
    return np.clip(img, 0.0, 1.0)


def _make_encoder(cfg: SyntheticConfig, rng: np.random.Generator) -> SyntheticEncoder:
    fs = cfg.feature_size
    n_feat = fs * fs * 3
    proj = rng.normal(size=(cfg.embed_dim, n_feat)) / np.sqrt(n_feat)
    # functional prototypes: receptive-field centre, width and colour tuning
    centers = rng.uniform(0, fs, size=(cfg.n_types, 2))
    widths = rng.uniform(0.6, 2.0, size=cfg.n_types)
    colors = rng.normal(size=(cfg.n_types, 3))
    gy, gx = np.mgrid[0:fs, 0:fs]
    weights, biases, embeddings, coords = {}, {}, {}, {}
    for s in range(1, cfg.n_subjects + 1):
        types = rng.integers(0, cfg.n_types, size=cfg.n_voxels)
        ctr = centers[types] + rng.normal(scale=0.3, size=(cfg.n_voxels, 2))
        wid = widths[types] * np.exp(rng.normal(scale=0.1, size=cfg.n_voxels))
        col = colors[types] + rng.normal(scale=0.2, size=(cfg.n_voxels, 3))
        rf = np.exp(
            -((gy[None] - ctr[:, 0, None, None]) ** 2 + (gx[None] - ctr[:, 1, None, None]) ** 2)
            / (2 * wid[:, None, None] ** 2)
        )
        w = rf[..., None] * col[:, None, None, :]
        w = w.reshape(cfg.n_voxels, n_feat)
        w *= 4.0 / np.linalg.norm(w, axis=1, keepdims=True)
        weights[s] = w
        biases[s] = -w @ np.full(n_feat, 0.5) + rng.normal(scale=0.1, size=cfg.n_voxels)
        embeddings[s] = w @ proj.T
        depth = rng.uniform(0, 1, size=(cfg.n_voxels, 1))
        coords[s] = np.hstack([ctr + rng.normal(scale=0.5, size=ctr.shape), depth])
    return SyntheticEncoder(weights, biases, embeddings, fs, coords)


def make_synthetic_dataset(config: SyntheticConfig):
    """Generate (pairs, encoder); pairs cover the train split then the test split.

    Train images are distinct and assigned to subjects round-robin; each test
    image is recorded once for every subject.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    encoder = _make_encoder(config, rng)
    subjects = encoder.subjects
    noise_rng = np.random.default_rng([config.seed, 1])

    def record(img, sid, split):
        act = encoder.predict(img, sid)
        if config.noise > 0:
            act = act + (config.noise * noise_rng.normal(size=act.shape)).astype(np.float32)
        return FmriSample(sid, act, img.image_id, LABELED, split)

    pairs = []
    for i in range(config.n_pairs):
        img = ImageRecord(f"train-{i:05d}", random_image(rng, config.image_size))
        pairs.append((record(img, subjects[i % len(subjects)], "train"), img))
    for i in range(config.n_test):
        img = ImageRecord(f"test-{i:05d}", random_image(rng, config.image_size))
        for sid in subjects:
            pairs.append((record(img, sid, "test"), img))
    return pairs, encoder


def split_pairs(pairs, split: str):
    return [p for p in pairs if p[0].split == split]


def zscore_activations(pairs):
    """Per-subject, per-voxel z-scoring with statistics from labeled train samples."""
    stats = {}
    for sid in sorted({s.subject_id for s, _ in pairs}):
        rows = [s.activations for s, _ in pairs
                if s.subject_id == sid and s.split == "train" and s.provenance == LABELED]
        if not rows:
            raise ConfigurationError(f"subject {sid} has no training samples to normalize with")
        a = np.stack(rows).astype(np.float64)
        std = a.std(axis=0)
        stats[sid] = (a.mean(axis=0), np.where(std > 0, std, 1.0))
    out = []
    for s, img in pairs:
        mu, sd = stats[s.subject_id]
        out.append((replace(s, activations=((s.activations - mu) / sd).astype(np.float32)), img))
    return out, stats


# ---------------------------------------------------------------------------
# enrichment


class EnrichmentPool:
    """Encoder predictions for unlabeled images; each epoch draws one subject per image."""

    def __init__(self, images, predictions, subjects, seed):
        self.images = list(images)
        self.predictions = predictions  # subject -> (n_images, V_s)
        self.subjects = list(subjects)
        self.seed = seed

    def __len__(self):
        return len(self.images)

    def subject_choices(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch])
        return np.asarray(self.subjects)[rng.integers(0, len(self.subjects), size=len(self.images))]

    def for_epoch(self, epoch: int) -> list[FmriSample]:
        if not self.images:
            return []
        choice = self.subject_choices(epoch)
        return [
            FmriSample(int(s), self.predictions[int(s)][i], img.image_id, ENRICHED, "train")
            for i, (s, img) in enumerate(zip(choice, self.images))
        ]

    def pairs_for_epoch(self, epoch: int):
        return list(zip(self.for_epoch(epoch), self.images))


def enrich_with_unlabeled(images: Sequence[ImageRecord], encoder, subjects, seed) -> EnrichmentPool:
    missing = [s for s in subjects if s not in encoder.subjects]
    if missing:
        raise ConfigurationError(f"encoder has no predictions for subjects {missing}")
    preds = {}
    for s in subjects:
        rows = [encoder.predict(img, s) for img in images]
        preds[s] = np.stack(rows) if rows else np.zeros((0, 0), np.float32)
    return EnrichmentPool(images, preds, subjects, seed)


# ---------------------------------------------------------------------------
# persistence


def save_dataset(path, pairs, extra: dict | None = None):
    """One little-endian float32 row-major file per subject, images in one file, JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images, image_ids = [], {}
    for _, img in pairs:
        if img.image_id not in image_ids:
            image_ids[img.image_id] = len(images)
            images.append(img.pixels.astype("<f4"))
    samples, rows = [], {}
    for s, img in pairs:
        rows.setdefault(s.subject_id, []).append(s.activations.astype("<f4"))
        samples.append({
            "subject": s.subject_id,
            "row": len(rows[s.subject_id]) - 1,
            "image_id": img.image_id,
            "provenance": s.provenance,
            "split": s.split,
        })
    subjects = {}
    for sid, r in sorted(rows.items()):
        arr = np.ascontiguousarray(np.stack(r), dtype="<f4")
        arr.tofile(path / f"subj{sid}.bin")
        subjects[str(sid)] = {"n_voxels": arr.shape[1], "n_samples": arr.shape[0], "file": f"subj{sid}.bin"}
    img_arr = np.ascontiguousarray(np.stack(images), dtype="<f4")
    img_arr.tofile(path / "images.bin")
    manifest = {
        "format": "brainit-dataset/1",
        "dtype": "float32-le",
        "subjects": subjects,
        "images": {"file": "images.bin", "shape": list(img_arr.shape), "ids": list(image_ids)},
        "samples": samples,
        "counts": {
            prov: sum(1 for s in samples if s["provenance"] == prov) for prov in (LABELED, ENRICHED)
        },
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(path, normalize: bool = False):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    ishape = manifest["images"]["shape"]
    imgs = np.fromfile(path / manifest["images"]["file"], dtype="<f4").reshape(ishape)
    images = {iid: ImageRecord(iid, imgs[i]) for i, iid in enumerate(manifest["images"]["ids"])}
    acts = {}
    for sid, info in manifest["subjects"].items():
        acts[int(sid)] = np.fromfile(path / info["file"], dtype="<f4").reshape(
            info["n_samples"], info["n_voxels"])
    pairs = [
        (FmriSample(s["subject"], acts[s["subject"]][s["row"]], s["image_id"], s["provenance"], s["split"]),
         images[s["image_id"]])
        for s in manifest["samples"]
    ]
    if normalize:
        pairs, _ = zscore_activations(pairs)
    return pairs, manifest
