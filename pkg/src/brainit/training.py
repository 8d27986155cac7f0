"""BIT training: semantic stage 1 (L2), stage 2 (joint diffusion), low-level head (InfoNCE)."""

from __future__ import annotations

import copy
import logging
import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .bit import BIT, make_batch
from .errors import CapabilityError, DivergenceError
from .features import ConvTokenLayout, extract_conv_tokens, to_tensor

log = logging.getLogger(__name__)


@dataclass
class TrainSchedule:
    epochs: int = 60
    lr: float = 5e-4
    warmup_epochs: int = 15
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    batch_size: int = 128
    grad_accum: int = 1
    weight_decay: float = 0.01
    precision: str = "fp32"
    val_fraction: float = 0.1
    n_voxels_sample: int | None = 15000
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup must lie in [0, epochs]")
        if self.precision not in ("fp32", "bf16", "fp64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @classmethod
    def semantic_stage1(cls, **kw):
        return cls(**{"batch_size": 128, **kw})

    @classmethod
    def lowlevel(cls, **kw):
        return cls(**{"batch_size": 64, **kw})

    @classmethod
    def stage2(cls, **kw):
        base = dict(epochs=10, lr=1e-5, warmup_epochs=0, batch_size=16, grad_accum=4)
        return cls(**{**base, **kw})

    def warmup_factor(self, epoch: int) -> float:
        if self.warmup_epochs == 0:
            return 1.0
        return min(1.0, (epoch + 1) / self.warmup_epochs)

    def to_dict(self):
        return asdict(self)


@dataclass
class InfoNCEConfig:
    temperature: float = 0.07
    layer_weights: list[float] | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def infonce_loss(predicted: torch.Tensor, target: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Mean over rows of -log softmax_j(cos(p_i, t_j) / tau)[i]."""
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    n = predicted.shape[0]
    if n <= 1:
        return predicted.sum() * 0.0
    sim = F.normalize(predicted, dim=-1) @ F.normalize(target, dim=-1).T
    if torch.isnan(sim).any():
        raise ValueError("NaN cosine similarity (zero-norm token?)")
    return F.cross_entropy(sim / temperature, torch.arange(n, device=sim.device))


def layered_infonce(pred, target, layer_ids, config: InfoNCEConfig, n_layers: int) -> torch.Tensor:
    """Per-layer InfoNCE over the pool of all sampled tokens of that layer in the batch, summed."""
    weights = config.layer_weights or [1.0] * n_layers
    total = pred.new_zeros(())
    for layer in range(n_layers):
        sel = layer_ids == layer
        if sel.any() and weights[layer]:
            p = pred[:, sel].reshape(-1, pred.shape[-1])
            t = target[:, sel].reshape(-1, target.shape[-1])
            total = total + weights[layer] * infonce_loss(p, t, config.temperature)
    return total


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf


def split_validation(items, fraction: float, seed: int):
    if fraction <= 0 or len(items) < 2:
        return list(items), []
    rng = np.random.default_rng([seed, 99])
    order = rng.permutation(len(items))
    n_val = max(1, int(round(fraction * len(items))))
    val = set(order[:n_val].tolist())
    return [it for i, it in enumerate(items) if i not in val], [it for i, it in enumerate(items) if i in val]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _autocast(precision):
    if precision == "bf16":
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return nullcontext()


def fit(model, params, train_items, val_items, step_loss: Callable, val_loss: Callable,
        schedule: TrainSchedule, extra_items: Callable | None = None,
        step_hook: Callable | None = None) -> TrainResult:
    """Generic loop: AdamW, linear warmup, ReduceLROnPlateau on validation, best-checkpoint restore.

    ``step_loss(batch, epoch, step)`` returns a scalar loss; ``extra_items(epoch)``
    supplies per-epoch enrichment items appended to the labeled ones.
    """
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=schedule.lr * schedule.warmup_factor(0),
                            weight_decay=schedule.weight_decay)
    plateau = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=schedule.plateau_factor, patience=schedule.plateau_patience)
    result = TrainResult()
    best_state = None
    modules = [m for m in (model if isinstance(model, (list, tuple)) else [model]) if m is not None]
    for epoch in range(schedule.epochs):
        if epoch < schedule.warmup_epochs:
            for g in opt.param_groups:
                g["lr"] = schedule.lr * schedule.warmup_factor(epoch)
        lr_used = opt.param_groups[0]["lr"]
        items = list(train_items) + (extra_items(epoch) if extra_items else [])
        order = epoch_order(len(items), schedule.seed, epoch)
        for m in modules:
            m.train()
        losses = []
        opt.zero_grad(set_to_none=True)
        n_batches = math.ceil(len(items) / schedule.batch_size)
        for step in range(n_batches):
            batch = [items[i] for i in order[step * schedule.batch_size:(step + 1) * schedule.batch_size]]
            with _autocast(schedule.precision):
                loss = step_loss(batch, epoch, step)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"loss {loss.item()} at epoch {epoch} step {step} (lr {lr_used:.3g})")
            (loss / schedule.grad_accum).backward()
            if step_hook:
                step_hook(epoch, step)
            if (step + 1) % schedule.grad_accum == 0 or step == n_batches - 1:
                opt.step()
                opt.zero_grad(set_to_none=True)
            losses.append(loss.item())
        for m in modules:
            m.eval()
        with torch.no_grad():
            v = float(val_loss(val_items)) if val_items else float(np.mean(losses))
        result.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": v, "lr": lr_used})
        log.info("epoch %d train %.5f val %.5f lr %.3g", epoch, np.mean(losses), v, lr_used)
        if v < result.best_val:
            result.best_val, result.best_epoch = v, epoch
            best_state = [copy.deepcopy(m.state_dict()) for m in modules]
        if epoch + 1 >= schedule.warmup_epochs:
            plateau.step(v)
    if best_state is not None:
        for m, s in zip(modules, best_state):
            m.load_state_dict(s)
    return result


def _step_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _cast(model, schedule):
    return model.double() if schedule.precision == "fp64" else model


def _dtype(schedule):
    return torch.float64 if schedule.precision == "fp64" else torch.float32


# ---------------------------------------------------------------------------
# semantic head


def semantic_targets(images, backbone, batch: int = 256) -> dict[str, torch.Tensor]:
    """Target tokens per image id from the registered semantic backbone."""
    out = {}
    images = list({im.image_id: im for im in images}.values())
    with torch.no_grad():
        for i in range(0, len(images), batch):
            chunk = images[i:i + batch]
            toks = backbone(to_tensor(chunk))
            out.update({im.image_id: t for im, t in zip(chunk, toks)})
    return out


def _stack_targets(batch, targets, dtype):
    return torch.stack([targets[img.image_id] for _, img in batch]).to(dtype)


def train_stage1_semantic(model: BIT, pairs, v2c, targets: dict, schedule: TrainSchedule,
                          enrichment=None, step_hook=None) -> TrainResult:
    """Align BIT outputs with precomputed semantic tokens under an MSE loss."""
    model = _cast(model, schedule)
    dtype = _dtype(schedule)
    train, val = split_validation(pairs, schedule.val_fraction, schedule.seed)

    def step_loss(batch, epoch, step):
        b = make_batch([s for s, _ in batch], v2c, schedule.n_voxels_sample,
                       seed=(schedule.seed, epoch, step))
        return F.mse_loss(model(b[0].to(dtype), *b[1:]), _stack_targets(batch, targets, dtype))

    def val_loss(items):
        total = 0.0
        for i in range(0, len(items), 256):
            chunk = items[i:i + 256]
            b = make_batch([s for s, _ in chunk], v2c, schedule.n_voxels_sample, seed=(schedule.seed, 2**31, i))
            total += F.mse_loss(model(b[0].to(dtype), *b[1:]), _stack_targets(chunk, targets, dtype),
                                reduction="sum").item()
        return total / (len(items) * next(iter(targets.values())).numel())

    extra = enrichment.pairs_for_epoch if enrichment is not None and len(enrichment) else None
    return fit(model, model.parameters(), train, val, step_loss, val_loss, schedule, extra, step_hook)


def train_stage2_joint(model: BIT, backend, pairs, v2c, schedule: TrainSchedule,
                       freeze_bit: bool = False, train_backend: bool = True, enrichment=None,
                       noise_scale: float = 1.0, step_hook=None, trainable: set | None = None) -> TrainResult:
    """Jointly fine-tune BIT and the diffusion denoiser with the denoising objective.

    ``trainable`` restricts the BIT parameters that are updated to the given names.
    """
    if "train" not in getattr(backend, "capabilities", set()):
        raise CapabilityError(
            f"{type(backend).__name__} cannot be trained; use the toy backend for joint training")
    model = _cast(model, schedule)
    dtype = _dtype(schedule)
    for n, p in model.named_parameters():
        p.requires_grad_(not freeze_bit and (trainable is None or n in trainable))
    denoiser = backend.trainable_module()
    for p in denoiser.parameters():
        p.requires_grad_(train_backend)
    train, val = split_validation(pairs, schedule.val_fraction, schedule.seed)

    def images_of(batch):
        return to_tensor([img for _, img in batch], backend.resolution, dtype)

    def step_loss(batch, epoch, step):
        b = make_batch([s for s, _ in batch], v2c, schedule.n_voxels_sample, seed=(schedule.seed, epoch, step))
        cond = model(b[0].to(dtype), *b[1:])
        gen = torch.Generator().manual_seed(_step_seed(schedule.seed, epoch, step))
        return backend.training_loss(images_of(batch), cond, gen, noise_scale=noise_scale)

    def val_loss(items):
        b = make_batch([s for s, _ in items], v2c, schedule.n_voxels_sample, seed=(schedule.seed, 2**31))
        gen = torch.Generator().manual_seed(schedule.seed + 12345)
        return backend.training_loss(images_of(items), model(b[0].to(dtype), *b[1:]), gen,
                                     noise_scale=noise_scale).item()

    params = list(model.parameters()) + list(denoiser.parameters())
    extra = enrichment.pairs_for_epoch if enrichment is not None and len(enrichment) else None
    try:
        return fit([model, denoiser], params, train, val, step_loss, val_loss, schedule, extra, step_hook)
    finally:
        for p in list(model.parameters()) + list(denoiser.parameters()):
            p.requires_grad_(True)


# ---------------------------------------------------------------------------
# low-level head


def conv_targets(images, extractor, layout: ConvTokenLayout, batch: int = 64) -> dict[str, torch.Tensor]:
    out = {}
    images = list({im.image_id: im for im in images}.values())
    for i in range(0, len(images), batch):
        chunk = images[i:i + batch]
        toks = extract_conv_tokens(chunk, extractor, layout).tokens
        out.update({im.image_id: t for im, t in zip(chunk, toks)})
    return out


def train_lowlevel(model: BIT, pairs, v2c, targets: dict, layout: ConvTokenLayout,
                   infonce: InfoNCEConfig, schedule: TrainSchedule, enrichment=None,
                   step_hook=None) -> TrainResult:
    """Per-layer InfoNCE on a random subset of token positions each step."""
    model = _cast(model, schedule)
    dtype = _dtype(schedule)
    n_layers = len(layout.layers)
    train, val = split_validation(pairs, schedule.val_fraction, schedule.seed)

    def loss_on(batch, positions, seed):
        b = make_batch([s for s, _ in batch], v2c, schedule.n_voxels_sample, seed=seed)
        pred = model(b[0].to(dtype), *b[1:], query_index=positions)
        tgt = _stack_targets(batch, targets, dtype)[:, positions]
        return layered_infonce(pred, tgt, layout.layer_of(positions), infonce, n_layers)

    def step_loss(batch, epoch, step):
        gen = torch.Generator().manual_seed(_step_seed(schedule.seed, epoch, step))
        return loss_on(batch, layout.sample_positions(gen), (schedule.seed, epoch, step))

    def val_loss(items):
        gen = torch.Generator().manual_seed(schedule.seed + 4242)
        return loss_on(items, layout.sample_positions(gen), (schedule.seed, 2**31)).item()

    extra = enrichment.pairs_for_epoch if enrichment is not None and len(enrichment) else None
    return fit(model, model.parameters(), train, val, step_loss, val_loss, schedule, extra, step_hook)


def lowlevel_schedule_for(layout: ConvTokenLayout, **kw) -> TrainSchedule:
    return TrainSchedule.lowlevel(**kw)


def with_overrides(schedule: TrainSchedule, **kw) -> TrainSchedule:
    return replace(schedule, **{k: v for k, v in kw.items() if v is not None})
