"""Toy end-to-end pipeline and ablation studies, shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .bit import BIT, BITConfig
from .cross_transformer import CrossTransformerConfig
from .data import (ImageRecord, SyntheticConfig, enrich_with_unlabeled, make_synthetic_dataset,
                   random_image, split_pairs)
from .diffusion import ToyDiffusionBackend
from .dip import DipConfig
from .features import ConvTokenLayout, ToyConvExtractor, ToySemanticBackbone, to_tensor
from .generation import (BrainITModels, GenerationConfig, dual_branch_generate, lowlevel_images,
                         semantic_only_generate)
from .metrics import MetricReport, evaluate
from .training import (InfoNCEConfig, TrainSchedule, _step_seed, conv_targets, fit, semantic_targets,
                       split_validation, train_lowlevel, train_stage1_semantic, train_stage2_joint)
from .v2c import GmmConfig, fit_anatomical_v2c, fit_v2c

log = logging.getLogger(__name__)

LOWLEVEL_CHANNELS = (8, 16, 16, 16, 16)


@dataclass
class ToyConfig:
    """Desk-scale settings; every size is a small stand-in for the full model."""
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    k: int = 8
    clustering: str = "functional"
    d: int = 32
    heads: int = 4
    blocks: int = 2
    token_dim: int = 64
    emb_std: float = 0.02
    enrichment: bool = True
    n_unlabeled: int = 1000
    semantic_epochs: int = 60
    lowlevel_epochs: int = 30
    stage2_epochs: int = 3
    backend_epochs: int = 150
    lr: float = 1e-2
    lowlevel_lr: float = 3e-3
    warmup_epochs: int = 3
    batch_size: int = 32
    n_voxels_sample: int | None = None  # None: as many draws as the subject has voxels
    dip: DipConfig = field(default_factory=lambda: DipConfig(in_channels=8, width=16, iterations=300, lr=5e-3))
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["synth"] = SyntheticConfig(**d["synth"])
        d["dip"] = DipConfig(**d["dip"])
        d["generation"] = GenerationConfig(**d["generation"])
        return cls(**d)

    def schedule(self, epochs, **kw) -> TrainSchedule:
        base = dict(epochs=epochs, lr=self.lr, warmup_epochs=min(self.warmup_epochs, epochs),
                    batch_size=self.batch_size, seed=self.seed,
                    n_voxels_sample=self.n_voxels_sample or self.synth.n_voxels)
        return TrainSchedule(**{**base, **kw})


def toy_backbone(cfg: ToyConfig) -> ToySemanticBackbone:
    return ToySemanticBackbone(cfg.synth.image_size, 4, cfg.token_dim, seed=cfg.seed)


def toy_extractor(cfg: ToyConfig) -> ToyConvExtractor:
    return ToyConvExtractor(LOWLEVEL_CHANNELS, cfg.synth.image_size, seed=cfg.seed)


def toy_layout(cfg: ToyConfig) -> ConvTokenLayout:
    n = cfg.synth.image_size
    # every position of the three finest layers is too many for one batch; sample a quarter
    layout = ConvTokenLayout.for_extractor(LOWLEVEL_CHANNELS, n, cfg.token_dim)
    for layer in layout.layers:
        layer.n_sample = max(1, layer.n_tokens // 4) if layer.n_tokens > 16 else layer.n_tokens
    return layout


def unlabeled_images(cfg: ToyConfig) -> list[ImageRecord]:
    rng = np.random.default_rng([cfg.synth.seed, 7])
    return [ImageRecord(f"unlabeled-{i:05d}", random_image(rng, cfg.synth.image_size))
            for i in range(cfg.n_unlabeled)]


def cluster(encoder, cfg: ToyConfig):
    gmm = GmmConfig(k=cfg.k, seed=cfg.seed)
    if cfg.clustering == "anatomical":
        return fit_anatomical_v2c({s: encoder.coordinates(s) for s in encoder.subjects}, gmm)
    return fit_v2c({s: encoder.voxel_embeddings(s) for s in encoder.subjects}, gmm)


def _bit(cfg: ToyConfig, n_voxels, n_queries, seed_offset):
    cross = CrossTransformerConfig(blocks=cfg.blocks, heads=cfg.heads, d=cfg.d, d_out=cfg.token_dim,
                                   n_queries=n_queries)
    return BIT(BITConfig(n_voxels, cfg.k, cross, emb_std=cfg.emb_std, seed=cfg.seed + seed_offset))


def semantic_bit(cfg: ToyConfig, n_voxels) -> BIT:
    return _bit(cfg, n_voxels, toy_backbone(cfg).n_tokens, 0)


def lowlevel_bit(cfg: ToyConfig, n_voxels) -> BIT:
    bit = _bit(cfg, n_voxels, toy_layout(cfg).n_tokens, 1)
    bit.config.layout = "conv-layers"
    return bit


def make_backend(cfg: ToyConfig) -> ToyDiffusionBackend:
    return ToyDiffusionBackend.trainable_toy(toy_backbone(cfg).n_tokens, cfg.synth.image_size,
                                             cfg.token_dim, seed=cfg.seed)


def pretrain_backend(backend, images, backbone, cfg: ToyConfig):
    """Fit the toy denoiser on ground-truth tokens, standing in for a pretrained generator."""
    targets = semantic_targets(images, backbone)
    items = list(images)
    train, val = split_validation(items, 0.1, cfg.seed)
    den = backend.trainable_module()
    sched = cfg.schedule(cfg.backend_epochs, warmup_epochs=0, batch_size=64)

    def batch_loss(batch, seed):
        x = to_tensor(batch, backend.resolution)
        cond = torch.stack([targets[im.image_id] for im in batch])
        return backend.training_loss(x, cond, torch.Generator().manual_seed(seed))

    return fit(den, den.parameters(), train, val,
               lambda b, e, s: batch_loss(b, _step_seed(cfg.seed, e, s)),
               lambda v: batch_loss(v, cfg.seed + 999).item(), sched)


@dataclass
class TrainedPipeline:
    models: BrainITModels
    backend: ToyDiffusionBackend
    histories: dict
    timings: dict


def subject_voxels(pairs) -> dict[int, int]:
    return {s.subject_id: s.n_voxels for s, _ in pairs}


def enrichment_pool(cfg: ToyConfig, encoder, subjects, unlabeled):
    if not cfg.enrichment or not len(unlabeled):
        return None
    return enrich_with_unlabeled(list(unlabeled), encoder, sorted(subjects), cfg.seed)


def fit_semantic(cfg: ToyConfig, train_pairs, v2c, images, pool=None):
    """Stage 1: regress the backbone's semantic tokens."""
    bit = semantic_bit(cfg, subject_voxels(train_pairs))
    targets = semantic_targets(images, toy_backbone(cfg))
    hist = train_stage1_semantic(bit, train_pairs, v2c, targets, cfg.schedule(cfg.semantic_epochs), pool)
    return bit, hist.history


def fit_joint(cfg: ToyConfig, bit, backend, train_pairs, v2c, pool=None):
    """Stage 2: fine-tune the semantic head and the denoiser through the denoising loss."""
    sched = cfg.schedule(cfg.stage2_epochs, lr=cfg.lr * 0.1, warmup_epochs=0, batch_size=16, grad_accum=4)
    return train_stage2_joint(bit, backend, train_pairs, v2c, sched, enrichment=pool).history


def fit_lowlevel(cfg: ToyConfig, train_pairs, v2c, images, pool=None):
    """Per-layer InfoNCE on conv tokens of the toy extractor."""
    bit = lowlevel_bit(cfg, subject_voxels(train_pairs))
    targets = conv_targets(images, toy_extractor(cfg), toy_layout(cfg))
    hist = train_lowlevel(bit, train_pairs, v2c, targets, toy_layout(cfg), InfoNCEConfig(),
                          cfg.schedule(cfg.lowlevel_epochs, lr=cfg.lowlevel_lr), pool)
    return bit, hist.history


def train_pipeline(cfg: ToyConfig, pairs, encoder, v2c, unlabeled=(), heads=("semantic", "lowlevel"),
                   backend=None, stage2: bool = True) -> TrainedPipeline:
    torch.manual_seed(cfg.seed)
    train_pairs = split_pairs(pairs, "train")
    unlabeled = list(unlabeled) if cfg.enrichment else []
    pool = enrichment_pool(cfg, encoder, subject_voxels(train_pairs), unlabeled)
    images = [im for _, im in train_pairs] + unlabeled
    hist, times = {}, {}

    t0 = time.perf_counter()
    if backend is None:
        backend = make_backend(cfg)
        hist["backend"] = pretrain_backend(backend, images, toy_backbone(cfg), cfg).history
    times["backend"] = time.perf_counter() - t0

    semantic = lowlevel = None
    if "semantic" in heads:
        t0 = time.perf_counter()
        semantic, hist["semantic"] = fit_semantic(cfg, train_pairs, v2c, images, pool)
        if stage2 and cfg.stage2_epochs:
            hist["stage2"] = fit_joint(cfg, semantic, backend, train_pairs, v2c, pool)
        times["semantic"] = time.perf_counter() - t0
    if "lowlevel" in heads:
        t0 = time.perf_counter()
        lowlevel, hist["lowlevel"] = fit_lowlevel(cfg, train_pairs, v2c, images, pool)
        times["lowlevel"] = time.perf_counter() - t0
    models = BrainITModels(v2c, semantic, lowlevel, toy_extractor(cfg), toy_layout(cfg), cfg.dip)
    return TrainedPipeline(models, backend, hist, times)


def untrained_models(cfg: ToyConfig, encoder, v2c) -> BrainITModels:
    """Freshly initialised heads sharing every other component of a trained run."""
    n_voxels = {s: encoder.weights[s].shape[0] for s in encoder.subjects}
    return BrainITModels(v2c, semantic_bit(cfg, n_voxels), lowlevel_bit(cfg, n_voxels),
                         toy_extractor(cfg), toy_layout(cfg), cfg.dip)


def reconstruct(samples, models: BrainITModels, backend, mode: str, gen: GenerationConfig,
                lowlevel=None) -> np.ndarray:
    """(N, R, R, 3) reconstructions for ``mode`` in dual / semantic / lowlevel."""
    samples = list(samples)
    if mode in ("dual", "lowlevel") and lowlevel is None:
        lowlevel = lowlevel_images(samples, models, gen.seed)
    if mode == "dual":
        recs = dual_branch_generate(samples, models, backend, gen, lowlevel=lowlevel)
    elif mode == "semantic":
        recs = semantic_only_generate(samples, models, backend, gen)
    elif mode == "lowlevel":
        return np.clip(to_tensor(lowlevel, backend.resolution, torch.float64)
                       .permute(0, 2, 3, 1).numpy(), 0, 1)
    else:
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    return np.stack([r.pixels for r in recs])


def evaluate_by_subject(samples, recons, images, metrics="all", seed=0) -> MetricReport:
    """Per-subject metric reports averaged into one (test images repeat across subjects)."""
    by_img = {im.image_id: im for im in images}
    reports = {}
    for sid in sorted({s.subject_id for s in samples}):
        rows = [i for i, s in enumerate(samples) if s.subject_id == sid]
        gts = np.stack([by_img[samples[i].image_id].pixels for i in rows])
        reports[sid] = evaluate(recons[rows], gts, metrics, toy=True, seed=seed)
    keys = next(iter(reports.values())).values
    values = {k: float(np.mean([r.values[k] for r in reports.values()])) for k in keys}
    meta = {"n_images": len(samples), "subjects": sorted(reports), "seed": seed,
            "extractors": next(iter(reports.values())).meta["extractors"],
            "per_subject": {str(s): r.values for s, r in reports.items()}}
    return MetricReport(values, meta)


def test_samples(pairs):
    test = split_pairs(pairs, "test")
    return [s for s, _ in test], [im for _, im in test]


def run_toy_pipeline(cfg: ToyConfig, modes=("dual",), metrics="all", baseline: bool = False) -> dict:
    """Synthesize, cluster, train, reconstruct the test split and score it."""
    t_start = time.perf_counter()
    pairs, encoder = make_synthetic_dataset(cfg.synth)
    v2c = cluster(encoder, cfg)
    trained = train_pipeline(cfg, pairs, encoder, v2c, unlabeled_images(cfg))
    samples, images = test_samples(pairs)
    low = lowlevel_images(samples, trained.models, cfg.generation.seed)
    out = {"reports": {}, "histories": trained.histories, "timings": trained.timings}
    for mode in modes:
        rec = reconstruct(samples, trained.models, trained.backend, mode, cfg.generation, low)
        out["reports"][mode] = evaluate_by_subject(samples, rec, images, metrics, cfg.seed)
        out.setdefault("recons", {})[mode] = rec
    if baseline:
        base = untrained_models(cfg, encoder, v2c)
        rec = reconstruct(samples, base, trained.backend, "dual", cfg.generation)
        out["reports"]["untrained"] = evaluate_by_subject(samples, rec, images, metrics, cfg.seed)
    out["images"] = images
    out["timings"]["total"] = time.perf_counter() - t_start
    return out


# ---------------------------------------------------------------------------
# ablations


def ablate(study: str, cfg: ToyConfig, ks=(8, 32, 128), metrics="all") -> dict:
    """Rows of metric reports keyed by the ablated setting."""
    rows = {}
    if study == "clusters":
        for k in ks:
            res = run_toy_pipeline(replace(cfg, k=int(k)), metrics=metrics)
            rows[f"K={k}"] = res["reports"]["dual"]
    elif study == "branches":
        res = run_toy_pipeline(cfg, modes=("lowlevel", "semantic", "dual"), metrics=metrics)
        names = {"lowlevel": "Low-Level only", "semantic": "Semantic only", "dual": "Combined"}
        rows = {names[m]: res["reports"][m] for m in ("lowlevel", "semantic", "dual")}
    elif study == "enrichment":
        for flag in (False, True):
            res = run_toy_pipeline(replace(cfg, enrichment=flag), metrics=metrics)
            rows["with external images" if flag else "without external images"] = res["reports"]["dual"]
    elif study == "clustering":
        for mode in ("functional", "anatomical"):
            res = run_toy_pipeline(replace(cfg, clustering=mode), metrics=metrics)
            rows[mode] = res["reports"]["dual"]
    else:
        raise ValueError(f"unknown study {study!r}")
    return rows
