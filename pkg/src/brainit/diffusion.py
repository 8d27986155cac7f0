"""Diffusion backends in pixel space.

The toy backend uses a variance-exploding linear schedule, x_i = x0 + sigma_i * eps,
with sigma_i = sigma_max * (T - i) / T, so sampling index 0 is the noisiest
level and sigma_T = 0. Sampling is the deterministic DDIM update
x_{i+1} = x0_hat + sigma_{i+1} * eps_hat with x0_hat = x_i - sigma_i * eps_hat.
"""

from __future__ import annotations

from typing import Protocol

import math

import numpy as np
import torch
from torch import nn

from .errors import CapabilityError


class DiffusionBackend(Protocol):
    capabilities: set
    resolution: int
    token_dim: int

    def sigmas(self, total_steps: int) -> torch.Tensor: ...

    def add_noise(self, image, step: int, total_steps: int, noise) -> torch.Tensor: ...

    def denoise_from(self, x, start_step: int, total_steps: int, cond) -> torch.Tensor: ...


class IdentityDenoiser(nn.Module):
    """Predicts zero noise: every DDIM step returns its input unchanged."""

    def forward(self, x, sigma, cond):
        return torch.zeros_like(x)


class LinearShrinkDenoiser(nn.Module):
    """x0_hat = x + lam * (m - x), where m is a fixed linear image of the mean condition token."""

    def __init__(self, token_dim: int, resolution: int, lam: float = 0.3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.lam = lam
        self.resolution = resolution
        n = 3 * resolution**2
        self.register_buffer("proj", torch.randn(token_dim, n, generator=gen, dtype=torch.float64) * 0.05)
        self.register_buffer("bias", torch.full((n,), 0.5, dtype=torch.float64))

    def target(self, cond):
        m = cond.mean(dim=1).to(self.proj.dtype) @ self.proj + self.bias
        return m.reshape(-1, 3, self.resolution, self.resolution)

    def forward(self, x, sigma, cond):
        return self.lam * (x - self.target(cond).to(x.dtype)) / sigma


class ToyDenoiserNet(nn.Module):
    """Trainable Gaussian-posterior denoiser.

    With x0 | tokens ~ N(mu(tokens), a I) and x = x0 + sigma * eps, the
    posterior mean is x0_hat = (a x + sigma^2 mu) / (a + sigma^2). mu is a
    linear decode of the tokens and a is one learned variance per channel, so
    the noised start image keeps a share a / (a + sigma^2) at every step.
    """

    def __init__(self, token_dim: int, n_tokens: int, resolution: int, seed: int = 0, prior_var: float = 0.05):
        super().__init__()
        torch.manual_seed(seed)
        self.resolution = resolution
        self.decode = nn.Linear(token_dim * n_tokens, 3 * resolution**2)
        self.log_var = nn.Parameter(torch.full((1, 3, 1, 1), math.log(prior_var)))

    def mean(self, cond):
        dtype = self.decode.weight.dtype
        mu = self.decode(cond.reshape(cond.shape[0], -1).to(dtype))
        return mu.reshape(-1, 3, self.resolution, self.resolution)

    def forward(self, x, sigma, cond):
        dtype = self.decode.weight.dtype
        xd = x.to(dtype)
        s2 = torch.as_tensor(sigma, dtype=dtype).reshape(-1, 1, 1, 1) ** 2
        a = self.log_var.exp().to(dtype)
        # eps_hat = (x - x0_hat) / sigma = sigma (x - mu) / (a + sigma^2)
        eps = s2.sqrt() * (xd - self.mean(cond)) / (a + s2)
        return eps.to(x.dtype)


class ToyDiffusionBackend:
    """16x16 pixel-space backend with exact, inspectable dynamics."""

    def __init__(self, denoiser: nn.Module, resolution: int = 16, token_dim: int = 64,
                 sigma_max: float = 1.0, sigma_fn=None, trainable: bool | None = None):
        self.denoiser = denoiser
        self.resolution = resolution
        self.token_dim = token_dim
        self.sigma_max = sigma_max
        self.sigma_fn = sigma_fn
        has_params = any(True for _ in denoiser.parameters())
        self.capabilities = {"sample", "refine"}
        if has_params if trainable is None else trainable:
            self.capabilities.add("train")

    @classmethod
    def identity(cls, **kw):
        return cls(IdentityDenoiser(), **kw)

    @classmethod
    def linear(cls, lam: float = 0.3, seed: int = 0, resolution: int = 16, token_dim: int = 64, **kw):
        return cls(LinearShrinkDenoiser(token_dim, resolution, lam, seed), resolution, token_dim, **kw)

    @classmethod
    def trainable_toy(cls, n_tokens: int, resolution: int = 16, token_dim: int = 64, seed: int = 0, **kw):
        return cls(ToyDenoiserNet(token_dim, n_tokens, resolution, seed=seed), resolution, token_dim, **kw)

    def sigmas(self, total_steps: int) -> torch.Tensor:
        if self.sigma_fn is not None:
            return torch.as_tensor(self.sigma_fn(total_steps), dtype=torch.float64)
        i = torch.arange(total_steps + 1, dtype=torch.float64)
        return self.sigma_max * (total_steps - i) / total_steps

    def add_noise(self, image, step: int, total_steps: int, noise) -> torch.Tensor:
        s = self.sigmas(total_steps)[step].to(image.dtype)
        return image + s * noise

    def denoise_from(self, x, start_step: int, total_steps: int, cond) -> torch.Tensor:
        sig = self.sigmas(total_steps).to(x.dtype)
        with torch.no_grad():
            for i in range(start_step, total_steps):
                eps = self.denoiser(x, sig[i], cond)
                x0 = x - sig[i] * eps
                x = x0 + sig[i + 1] * eps
        return x

    def trainable_module(self) -> nn.Module:
        if "train" not in self.capabilities:
            raise CapabilityError("backend has no trainable denoiser")
        return self.denoiser

    def training_loss(self, images, cond, generator, total_steps: int = 38, noise_scale: float = 1.0):
        """Noise-prediction MSE at a uniformly drawn schedule index in [0, T)."""
        B = images.shape[0]
        idx = torch.randint(0, total_steps, (B,), generator=generator)
        sig = self.sigmas(total_steps)[idx].to(images.dtype).reshape(B, 1, 1, 1)
        eps = torch.randn(images.shape, generator=generator, dtype=images.dtype) * noise_scale
        x = images + sig * eps
        pred = self.denoiser(x, sig.reshape(B), cond)
        return ((pred - eps) ** 2).mean()

    def refine(self, image):
        return image


def noise_like(shape, seeds, dtype=torch.float64) -> torch.Tensor:
    """Standard normal noise, one independent stream per seed (batch composition independent)."""
    return torch.stack([
        torch.as_tensor(np.random.default_rng(s).standard_normal(shape), dtype=dtype) for s in seeds
    ])
