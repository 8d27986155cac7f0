"""Flat run configuration: strict schema, defaults for the full-scale model."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigurationError

# key -> (default, type, comment)
SCHEMA = {
    "k": (128, int, "number of shared voxel clusters"),
    "covariance": ("diag", str, "GMM covariance type"),
    "gmm_max_iter": (100, int, "EM iterations"),
    "clustering": ("functional", str, "functional (voxel embeddings) or anatomical (coordinates)"),
    "d": (512, int, "token width inside the brain model"),
    "heads": (8, int, "attention heads in the cross-transformer"),
    "blocks": (5, int, "cross-transformer blocks"),
    "n_queries": (256, int, "semantic output tokens (16x16 grid)"),
    "d_out": (512, int, "output token width"),
    "n_voxels_sample": (15000, int, "voxels drawn per sample per step"),
    "epochs": (60, int, "stage-1 epochs"),
    "lr": (5e-4, float, "peak learning rate"),
    "warmup_epochs": (15, int, "linear warmup epochs"),
    "batch_size": (128, int, "semantic batch size"),
    "lowlevel_batch_size": (64, int, "low-level batch size"),
    "stage2_epochs": (10, int, "joint training epochs"),
    "stage2_lr": (1e-5, float, "joint training learning rate"),
    "stage2_batch_size": (16, int, "joint training batch size"),
    "stage2_grad_accum": (4, int, "joint training gradient accumulation"),
    "temperature": (0.07, float, "InfoNCE temperature"),
    "precision": ("fp32", str, "fp32, bf16 or fp64"),
    "enrichment": (True, bool, "add encoder-predicted fMRI for unlabeled images"),
    "steps": (38, int, "denoising steps in total"),
    "start": (14, int, "schedule index the low-level image is noised to"),
    "refine": (False, bool, "final image-to-image enhancement pass"),
    "dip_in_channels": (32, int, "DIP input noise channels"),
    "dip_width": (128, int, "DIP internal channels"),
    "dip_scales": (3, int, "DIP U-Net scales"),
    "dip_iterations": (2000, int, "DIP optimisation steps"),
    "dip_input_noise": (0.1, float, "std of the fixed DIP input"),
    "dip_reg_noise": (1 / 30, float, "std of per-step input perturbation"),
    "dip_ema": (0.99, float, "output moving-average factor"),
    "dip_lr": (1e-3, float, "DIP Adam learning rate"),
    "seed": (0, int, "global seed"),
}

CHOICES = {"covariance": {"diag", "full"}, "clustering": {"functional", "anatomical"},
           "precision": {"fp32", "bf16", "fp64"}}


def defaults() -> dict:
    return {k: v[0] for k, v in SCHEMA.items()}


def _coerce(key, value):
    default, typ, _ = SCHEMA[key]
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
        return value
    if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
    if typ is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigurationError(f"{key}: expected a number, got {value!r}")
    if typ is str and not isinstance(value, str):
        raise ConfigurationError(f"{key}: expected a string, got {value!r}")
    return typ(value)


def normalize(raw: dict | None) -> dict:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a flat mapping of key: value")
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = defaults()
    cfg.update({k: _coerce(k, v) for k, v in raw.items()})
    for key, allowed in CHOICES.items():
        if cfg[key] not in allowed:
            raise ConfigurationError(f"{key}: {cfg[key]!r} not in {sorted(allowed)}")
    if not 0 <= cfg["start"] < cfg["steps"]:
        raise ConfigurationError(f"start ({cfg['start']}) must satisfy 0 <= start < steps ({cfg['steps']})")
    if cfg["d"] % cfg["heads"]:
        raise ConfigurationError(f"d ({cfg['d']}) must be divisible by heads ({cfg['heads']})")
    if cfg["warmup_epochs"] > cfg["epochs"]:
        raise ConfigurationError("warmup_epochs exceeds epochs")
    for key in ("k", "d", "heads", "blocks", "n_queries", "d_out", "epochs", "steps", "dip_iterations",
                "dip_width", "dip_scales", "dip_in_channels", "batch_size", "n_voxels_sample"):
        if cfg[key] <= 0:
            raise ConfigurationError(f"{key} must be positive")
    return cfg


def validate_config(path) -> dict:
    """Load a YAML file, reject unknown keys and invalid values, fill defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from exc
    return normalize(raw)


def render(cfg: dict) -> str:
    """Normalized config as commented YAML, one key per line."""
    lines = []
    for key, (_, _, comment) in SCHEMA.items():
        value = yaml.safe_dump({key: cfg[key]}, default_flow_style=True).strip()[1:-1]
        lines.append(f"{value}  # {comment}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    """Stable under key order and re-serialization."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()
