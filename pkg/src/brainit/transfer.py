"""New-subject adaptation: only that subject's voxel embeddings are trained."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .bit import BIT
from .data import EnrichmentPool, enrich_with_unlabeled
from .errors import ConfigurationError
from .tokenizer import subject_key
from .training import (InfoNCEConfig, TrainSchedule, train_lowlevel, train_stage1_semantic,
                       train_stage2_joint, with_overrides)
from .v2c import V2CMapping, assign_new_subject

SAMPLES_PER_MINUTE = 30  # 450 trials per 15 minutes of scanning


def budget_to_samples(minutes: float, rate: float = SAMPLES_PER_MINUTE) -> int:
    if not minutes > 0:
        raise ValueError(f"budget must be positive, got {minutes} minutes")
    return int(round(minutes * rate))


@dataclass
class TransferConfig:
    minutes: float | None = None  # None: use every sample given
    enrichment: bool = True
    stages: tuple = ("semantic", "joint", "lowlevel")
    train_backend: bool = False
    semantic: dict = field(default_factory=dict)  # TrainSchedule overrides per stage
    joint: dict = field(default_factory=dict)
    lowlevel: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.minutes is not None and not self.minutes > 0:
            raise ValueError("transfer budget must be > 0 minutes")
        unknown = set(self.stages) - {"semantic", "joint", "lowlevel"}
        if unknown:
            raise ConfigurationError(f"unknown transfer stages {sorted(unknown)}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TransferResult:
    semantic: BIT | None
    lowlevel: BIT | None
    assignment: np.ndarray
    n_samples: int
    histories: dict


def _freeze_all_but(model: BIT, key: str):
    for name, p in model.named_parameters():
        p.requires_grad_(name == f"tokenizer.voxel_emb.{key}")


def _freeze_hook(model: BIT, key: str, backend=None):
    """Per-step assertion that no frozen tensor received a nonzero gradient."""
    frozen = [p for n, p in model.named_parameters() if n != f"tokenizer.voxel_emb.{key}"]
    if backend is not None and "train" in backend.capabilities:
        frozen += list(backend.trainable_module().parameters())

    def hook(epoch, step):
        for p in frozen:
            if p.grad is not None and bool((p.grad != 0).any()):
                raise AssertionError(f"frozen tensor got gradient at epoch {epoch} step {step}")
    return hook


def _prepare(base: BIT, subject_id: int, init: np.ndarray) -> BIT:
    model = copy.deepcopy(base)
    model.tokenizer.add_subject(subject_id, init)
    _freeze_all_but(model, subject_key(subject_id))
    return model


def adapt_subject(base: dict, new_pairs, encoder, v2c: V2CMapping, config: TransferConfig,
                  targets: dict | None = None, layout=None, backend=None, unlabeled=(),
                  schedules: dict | None = None, check_freeze: bool = True) -> TransferResult:
    """Fit voxel embeddings of one new subject on top of frozen base heads.

    ``base`` maps "semantic"/"lowlevel" to trained BITs; ``targets`` maps the
    same keys to target-token dicts. The new subject's clusters come from the
    encoder embeddings, which also initialize the decoder embeddings.
    """
    new_pairs = list(new_pairs)
    sids = {s.subject_id for s, _ in new_pairs}
    if len(sids) != 1:
        raise ConfigurationError(f"expected one new subject, got {sorted(sids)}")
    sid = sids.pop()
    if config.minutes is not None:
        n = budget_to_samples(config.minutes)
        new_pairs = new_pairs[:n]
    emb = np.asarray(encoder.voxel_embeddings(sid), dtype=np.float32)
    assignment = assign_new_subject(v2c, emb)
    v2c = copy.copy(v2c)
    v2c.assignments = {**v2c.assignments, sid: assignment}
    schedules = schedules or {}
    targets = targets or {}

    pool = EnrichmentPool([], {}, [sid], config.seed)
    if config.enrichment and len(unlabeled):
        pool = enrich_with_unlabeled(unlabeled, encoder, [sid], config.seed)

    out, histories = {"semantic": None, "lowlevel": None}, {}
    key = subject_key(sid)
    for head in ("semantic", "lowlevel"):
        if base.get(head) is None:
            continue
        d = base[head].config.d
        if emb.shape[1] != d:
            raise ConfigurationError(f"encoder voxel embedding dim {emb.shape[1]} != model dim {d}")
        model = _prepare(base[head], sid, emb)
        hook = _freeze_hook(model, key) if check_freeze else None
        if head == "semantic":
            if "semantic" in config.stages:
                sched = with_overrides(schedules.get("semantic", TrainSchedule.semantic_stage1()),
                                       seed=config.seed, **config.semantic)
                histories["semantic"] = train_stage1_semantic(model, new_pairs, v2c, targets["semantic"],
                                                              sched, pool, hook).history
            if "joint" in config.stages and backend is not None:
                sched = with_overrides(schedules.get("joint", TrainSchedule.stage2()),
                                       seed=config.seed, **config.joint)
                hook2 = None
                if check_freeze and not config.train_backend:
                    hook2 = _freeze_hook(model, key, backend)
                _freeze_all_but(model, key)
                histories["joint"] = _joint(model, backend, new_pairs, v2c, sched, pool, config, hook2, key)
        elif "lowlevel" in config.stages:
            if layout is None:
                raise ConfigurationError("low-level transfer needs the conv token layout")
            sched = with_overrides(schedules.get("lowlevel", TrainSchedule.lowlevel()),
                                   seed=config.seed, **config.lowlevel)
            histories["lowlevel"] = train_lowlevel(model, new_pairs, v2c, targets["lowlevel"], layout,
                                                   InfoNCEConfig(), sched, pool, hook).history
        out[head] = model
    return TransferResult(out["semantic"], out["lowlevel"], assignment, len(new_pairs), histories)


def _joint(model, backend, pairs, v2c, sched, pool, config, hook, key):
    res = train_stage2_joint(model, backend, pairs, v2c, sched, train_backend=config.train_backend,
                             enrichment=pool, step_hook=hook, trainable={f"tokenizer.voxel_emb.{key}"})
    _freeze_all_but(model, key)
    return res.history
