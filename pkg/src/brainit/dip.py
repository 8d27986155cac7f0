"""Low-level branch: Deep Image Prior inversion of predicted conv-feature tokens."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DivergenceError
from .features import ConvTokenLayout, to_tensor, untokenize


@dataclass
class DipConfig:
    in_channels: int = 32
    width: int = 128
    scales: int = 3
    iterations: int = 2000
    input_noise: float = 0.1
    reg_noise: float = 1 / 30
    ema: float = 0.99
    lr: float = 1e-3
    layer_weights: list[float] | None = None

    def __post_init__(self):
        if min(self.in_channels, self.width, self.scales, self.iterations) <= 0:
            raise ValueError("DIP dimensions and iterations must be positive")
        if not 0 < self.ema < 1:
            raise ValueError("ema must lie in (0, 1)")
        if self.input_noise < 0 or self.reg_noise < 0 or self.lr <= 0:
            raise ValueError("noise levels must be >= 0 and lr > 0")

    def to_dict(self):
        return asdict(self)


class GroupedConv(nn.Module):
    """n independent convolutions evaluated as one grouped conv over (1, n*C, H, W)."""

    def __init__(self, n, c_in, c_out, k, gen):
        super().__init__()
        self.n, self.pad = n, k // 2
        bound = 1 / math.sqrt(c_in * k * k)
        self.weight = nn.Parameter((torch.rand(n * c_out, c_in, k, k, generator=gen) * 2 - 1) * bound)
        self.bias = nn.Parameter((torch.rand(n * c_out, generator=gen) * 2 - 1) * bound)

    def forward(self, x):
        x = F.pad(x, [self.pad] * 4, mode="reflect") if self.pad else x
        return F.conv2d(x, self.weight, self.bias, groups=self.n)


def _cat(n, a, b):
    """Concatenate per-image channel groups of two grouped tensors."""
    _, ca, h, w = a.shape
    cb = b.shape[1]
    return torch.cat([a.reshape(1, n, ca // n, h, w), b.reshape(1, n, cb // n, h, w)], 2).reshape(
        1, ca + cb, h, w)


class DipGenerator(nn.Module):
    """Encoder-decoder with skips, `scales` resolutions, bilinear upsampling, sigmoid output.

    Holds ``n_images`` independent generators so a batch is inverted in one pass.
    """

    def __init__(self, n_images: int, config: DipConfig, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        n, w, s = n_images, config.width, config.scales
        self.n, self.scales = n, s
        self.inp = GroupedConv(n, config.in_channels, w, 3, gen)
        self.down = nn.ModuleList(GroupedConv(n, w, w, 3, gen) for _ in range(s))
        self.up = nn.ModuleList(GroupedConv(n, 2 * w, w, 3, gen) for _ in range(s - 1))
        self.out = GroupedConv(n, w, 3, 1, gen)

    def forward(self, z):
        act = nn.functional.leaky_relu
        h = act(self.inp(z), 0.2)
        skips = []
        for i, conv in enumerate(self.down):
            if i:
                h = F.avg_pool2d(h, 2)
            h = act(conv(h), 0.2)
            skips.append(h)
        for conv, skip in zip(self.up, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = act(conv(_cat(self.n, h, skip)), 0.2)
        return torch.sigmoid(self.out(h))


def feature_loss(maps, targets, weights) -> torch.Tensor:
    """Per-image weighted sum over layers of the mean squared feature error, shape (B,)."""
    total = 0
    for f, t, w in zip(maps, targets, weights):
        if w:
            total = total + w * ((f - t) ** 2).flatten(1).mean(1)
    return total


def feature_rel_l2(images, targets, extractor) -> np.ndarray:
    """||features(image) - target|| / ||target|| over all layers, per image."""
    with torch.no_grad():
        x = to_tensor(images, extractor.input_size, targets[0].dtype)
        maps = extractor(x)
        num = sum(((f - t) ** 2).flatten(1).sum(1) for f, t in zip(maps, targets))
        den = sum((t**2).flatten(1).sum(1) for t in targets)
    return (num.sqrt() / den.sqrt()).cpu().numpy()


@dataclass
class DipResult:
    images: np.ndarray  # (B, S, S, 3)
    loss_trace: list = field(default_factory=list)  # (step, mean loss)


def dip_invert_maps(targets, extractor, config: DipConfig, seed: int = 0, log_every: int = 1,
                    dtype=None) -> DipResult:
    dtype = dtype or targets[0].dtype
    targets = [t.to(dtype) for t in targets]
    n = targets[0].shape[0]
    size = extractor.input_size
    weights = config.layer_weights or [1.0] * len(targets)
    if len(weights) != len(targets):
        raise ValueError("one weight per layer required")
    gen = torch.Generator().manual_seed(seed)
    model = DipGenerator(n, config, seed).to(dtype)
    z = torch.randn(1, n * config.in_channels, size, size, generator=gen, dtype=dtype) * config.input_noise
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    ema, trace = None, []
    for step in range(config.iterations):
        z_t = z + torch.randn(z.shape, generator=gen, dtype=dtype) * config.reg_noise
        out = model(z_t).reshape(n, 3, size, size)
        loss = feature_loss(extractor(out), targets, weights).sum()
        if not torch.isfinite(loss):
            raise DivergenceError(f"DIP loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        o = out.detach()
        ema = o if ema is None else config.ema * ema + (1 - config.ema) * o
        if step % log_every == 0 or step == config.iterations - 1:
            trace.append((step, loss.item() / n))
    return DipResult(ema.permute(0, 2, 3, 1).cpu().numpy(), trace)


def dip_invert(target, extractor, layout: ConvTokenLayout, config: DipConfig, seed: int = 0,
               dtype=None, log_every: int = 1) -> DipResult:
    """Invert a (possibly batched) conv-token set into images at the extractor's input size."""
    layout.check(extractor)
    maps = untokenize(target, layout)
    return dip_invert_maps([m.detach() for m in maps], extractor, config, seed, log_every, dtype)


def upsample_for_diffusion(image, size: int = 256) -> np.ndarray:
    """Bilinear resize of an (H,W,3) or (B,H,W,3) image to size x size, range preserved."""
    arr = np.asarray(image)
    single = arr.ndim == 3
    x = torch.as_tensor(arr[None] if single else arr, dtype=torch.float64).permute(0, 3, 1, 2)
    if x.shape[-1] != size:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False,
                          antialias=x.shape[-1] > size)
    out = x.clamp(float(arr.min()), float(arr.max())).permute(0, 2, 3, 1).numpy().astype(arr.dtype)
    return out[0] if single else out
