"""Inference: low-level DIP image as a noised start for semantically conditioned denoising."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .bit import BIT, predict
from .data import FmriSample, ImageRecord
from .diffusion import noise_like
from .dip import DipConfig, dip_invert, upsample_for_diffusion
from .errors import CapabilityError, ConfigurationError
from .features import ConvTokenLayout
from .v2c import V2CMapping


@dataclass
class GenerationConfig:
    total_steps: int = 38
    start_step: int = 14
    refine: bool = False
    lowlevel_weight: float = 1.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.start_step < self.total_steps:
            raise ValueError(f"need 0 <= start_step ({self.start_step}) < total_steps ({self.total_steps})")

    def to_dict(self):
        return asdict(self)


@dataclass
class BrainITModels:
    v2c: V2CMapping
    semantic: BIT | None = None
    lowlevel: BIT | None = None
    extractor: object = None
    layout: ConvTokenLayout | None = None
    dip: DipConfig = field(default_factory=DipConfig)


def _as_list(fmri):
    single = isinstance(fmri, FmriSample)
    return ([fmri] if single else list(fmri)), single


def _wrap(images: np.ndarray, samples, single, tag):
    recs = [ImageRecord(f"{tag}:{s.image_id}", im) for s, im in zip(samples, images)]
    return recs[0] if single else recs


def _sample_seeds(config, samples):
    return [[config.seed, i] for i in range(len(samples))]


def lowlevel_images(samples, models: BrainITModels, seed: int = 0) -> np.ndarray:
    """Predict conv tokens for every position and DIP-invert them: (B, S, S, 3)."""
    if models.lowlevel is None or models.extractor is None or models.layout is None:
        raise ConfigurationError("low-level branch needs a trained head, extractor and layout")
    tokens = predict(models.lowlevel, samples, models.v2c).float()
    return dip_invert(tokens, models.extractor, models.layout, models.dip, seed=seed).images


def semantic_tokens(samples, models: BrainITModels) -> torch.Tensor:
    if models.semantic is None:
        raise ConfigurationError("semantic branch needs a trained head")
    return predict(models.semantic, samples, models.v2c)


def _check_backend(backend, cond):
    if "sample" not in backend.capabilities:
        raise CapabilityError(f"{type(backend).__name__} cannot sample")
    if cond.shape[-1] != backend.token_dim:
        raise ConfigurationError(f"condition width {cond.shape[-1]} != backend token width {backend.token_dim}")


def refine(image, backend, enabled: bool = True):
    """Optional image-to-image enhancement pass; identity when disabled."""
    if not enabled:
        return image
    if "refine" not in backend.capabilities:
        raise CapabilityError(f"{type(backend).__name__} has no refinement model")
    return backend.refine(image)


def _run(start, samples, cond, backend, config: GenerationConfig, start_step: int) -> np.ndarray:
    R = backend.resolution
    noise = noise_like((3, R, R), _sample_seeds(config, samples)) * config.noise_scale
    x = backend.add_noise(start, start_step, config.total_steps, noise)
    out = backend.denoise_from(x, start_step, config.total_steps, cond.to(torch.float64))
    out = refine(out, backend, config.refine)
    return out.clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()


def dual_branch_generate(fmri, models: BrainITModels, backend, config: GenerationConfig,
                         lowlevel: np.ndarray | None = None):
    """Noise the upsampled low-level image to ``start_step`` and denoise the rest under semantic tokens.

    ``lowlevel`` short-circuits the DIP branch with precomputed images.
    """
    samples, single = _as_list(fmri)
    cond = semantic_tokens(samples, models)
    _check_backend(backend, cond)
    low = lowlevel_images(samples, models, config.seed) if lowlevel is None else np.asarray(lowlevel)
    low = upsample_for_diffusion(low, backend.resolution)
    start = torch.as_tensor(low, dtype=torch.float64).permute(0, 3, 1, 2) * config.lowlevel_weight
    images = _run(start, samples, cond, backend, config, config.start_step)
    return _wrap(images, samples, single, "dual")


def semantic_only_generate(fmri, models: BrainITModels, backend, config: GenerationConfig):
    samples, single = _as_list(fmri)
    cond = semantic_tokens(samples, models)
    _check_backend(backend, cond)
    R = backend.resolution
    start = torch.zeros(len(samples), 3, R, R, dtype=torch.float64)
    images = _run(start, samples, cond, backend, config, 0)
    return _wrap(images, samples, single, "semantic")


def lowlevel_only_generate(fmri, models: BrainITModels, size: int | None = None, seed: int = 0,
                           lowlevel: np.ndarray | None = None):
    samples, single = _as_list(fmri)
    low = lowlevel_images(samples, models, seed) if lowlevel is None else np.asarray(lowlevel)
    if size is not None:
        low = upsample_for_diffusion(low, size)
    return _wrap(np.clip(low, 0, 1), samples, single, "lowlevel")
