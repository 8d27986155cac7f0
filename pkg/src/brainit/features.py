"""Frozen toy backbones and the conv-feature token layout."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError

MERGE_NONE = "none"
MERGE_2X2 = "2x2"
MERGE_2X2_OVERLAP = "2x2-overlap"


def to_tensor(images, size: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """(N,H,W,3) arrays/ImageRecords -> (N,3,size,size) tensor, bilinear-resized if needed."""
    if isinstance(images, torch.Tensor) and images.dim() == 4 and images.shape[1] == 3:
        x = images.to(dtype)
    else:
        if not isinstance(images, (list, tuple)):
            images = list(images) if getattr(images, "ndim", 3) == 4 else [images]
        px = [getattr(im, "pixels", im) for im in images]
        x = torch.stack([torch.as_tensor(p, dtype=dtype) for p in px]).permute(0, 3, 1, 2)
    if size is not None and x.shape[-1] != size:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False,
                          antialias=x.shape[-1] > size)
    return x


def _frozen(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


class ToyConvExtractor(nn.Module):
    """Small random frozen CNN with a VGG-like five-stage grid (full, /2, /4, /8, /16).

    Stands in for VGG-16-BN layers 1_2, 2_2, 3_3, 4_3, 5_3.
    """

    def __init__(self, channels=(8, 16, 32, 32, 32), input_size: int = 112, seed: int = 0,
                 dtype=torch.float32):
        super().__init__()
        self.channels = tuple(channels)
        self.input_size = input_size
        gen = torch.Generator().manual_seed(seed)
        convs, c_in = [], 3
        for c in self.channels:
            conv = nn.Conv2d(c_in, c, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * c_in)) ** 0.5)
                conv.bias.copy_(torch.randn(c, generator=gen) * 0.1)
            convs.append(conv)
            c_in = c
        self.convs = nn.ModuleList(convs)
        _frozen(self.to(dtype))

    def grid_sizes(self):
        return [self.input_size // 2**i for i in range(len(self.channels))]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[-1] != self.input_size:
            raise ConfigurationError(f"extractor expects {self.input_size}px input, got {x.shape[-1]}")
        h = x - 0.5
        maps = []
        for i, conv in enumerate(self.convs):
            if i:
                h = F.avg_pool2d(h, 2)
            h = F.relu(conv(h))
            maps.append(h)
        return maps


class ToySemanticBackbone(nn.Module):
    """Patch-grid tokens: tanh of a fixed random projection of each image patch."""

    def __init__(self, input_size: int = 16, grid: int = 4, token_dim: int = 64, seed: int = 0):
        super().__init__()
        self.input_size, self.grid, self.token_dim = input_size, grid, token_dim
        self.patch = input_size // grid
        n_in = 3 * self.patch**2
        gen = torch.Generator().manual_seed(seed + 777)
        self.weight = nn.Parameter(torch.randn(n_in, token_dim, generator=gen) * (3.0 / n_in) ** 0.5)
        self.bias = nn.Parameter(torch.randn(token_dim, generator=gen) * 0.1)
        _frozen(self)

    @property
    def n_tokens(self):
        return self.grid**2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = to_tensor(x, self.input_size) - 0.5
        B, p = x.shape[0], self.patch
        patches = x.reshape(B, 3, self.grid, p, self.grid, p).permute(0, 2, 4, 1, 3, 5)
        patches = patches.reshape(B, self.grid**2, -1)
        return torch.tanh(patches @ self.weight.to(x.dtype) + self.bias.to(x.dtype))


# ---------------------------------------------------------------------------
# token layout


@dataclass
class LayerSpec:
    name: str
    grid: int
    merge: str
    channels: int
    n_sample: int

    @property
    def token_grid(self) -> int:
        return {MERGE_NONE: self.grid, MERGE_2X2: self.grid // 2, MERGE_2X2_OVERLAP: self.grid - 1}[self.merge]

    @property
    def n_tokens(self) -> int:
        return self.token_grid**2

    @property
    def raw_dim(self) -> int:
        return self.channels * (1 if self.merge == MERGE_NONE else 4)


@dataclass
class ConvTokenLayout:
    layers: list[LayerSpec]
    padded_dim: int = 512
    input_size: int = 112

    def __post_init__(self):
        for layer in self.layers:
            if layer.raw_dim > self.padded_dim:
                raise ConfigurationError(f"{layer.name}: raw dim {layer.raw_dim} > padded {self.padded_dim}")
            if layer.n_sample > layer.n_tokens:
                raise ConfigurationError(f"{layer.name}: samples {layer.n_sample} > tokens {layer.n_tokens}")

    @classmethod
    def canonical(cls, channels=(64, 128, 256, 512, 512)):
        """112x112 VGG layout: 56^2, 55^2, 28^2, 14^2, 7^2 tokens padded to 512."""
        return cls.for_extractor(channels, 112, 512, (512, 512, 128, 64, 16))

    @classmethod
    def for_extractor(cls, channels, input_size, padded_dim, n_sample=None):
        names = ["conv1_2", "conv2_2", "conv3_3", "conv4_3", "conv5_3"]
        merges = [MERGE_2X2, MERGE_2X2_OVERLAP, MERGE_NONE, MERGE_NONE, MERGE_NONE]
        layers = []
        for i, c in enumerate(channels):
            spec = LayerSpec(names[i], input_size // 2**i, merges[i], c, 0)
            spec.n_sample = spec.n_tokens if n_sample is None else n_sample[i]
            layers.append(spec)
        return cls(layers, padded_dim, input_size)

    @property
    def token_counts(self) -> list[int]:
        return [layer.n_tokens for layer in self.layers]

    @property
    def n_tokens(self) -> int:
        return sum(self.token_counts)

    def offsets(self) -> list[int]:
        out, acc = [], 0
        for n in self.token_counts:
            out.append(acc)
            acc += n
        return out

    def check(self, extractor):
        grids = extractor.grid_sizes()
        chans = list(extractor.channels)
        want_g = [layer.grid for layer in self.layers]
        want_c = [layer.channels for layer in self.layers]
        if grids != want_g or chans != want_c or extractor.input_size != self.input_size:
            raise ConfigurationError(
                f"extractor grids {grids}/channels {chans} do not match layout {want_g}/{want_c}")

    def sample_positions(self, generator: torch.Generator) -> torch.Tensor:
        """Random per-layer subsets of token positions, as indices into the full token list."""
        idx = []
        for off, layer in zip(self.offsets(), self.layers):
            idx.append(off + torch.randperm(layer.n_tokens, generator=generator)[:layer.n_sample])
        return torch.cat(idx)

    def layer_of(self, positions: torch.Tensor) -> torch.Tensor:
        bounds = torch.tensor(self.offsets()[1:] + [self.n_tokens])
        return torch.bucketize(positions, bounds, right=True)

    def to_dict(self):
        return {"layers": [asdict(layer) for layer in self.layers],
                "padded_dim": self.padded_dim, "input_size": self.input_size}

    @classmethod
    def from_dict(cls, d):
        return cls([LayerSpec(**layer) for layer in d["layers"]], d["padded_dim"], d["input_size"])


def replicate(tokens: torch.Tensor, dim: int) -> torch.Tensor:
    """Tile the last axis until it is ``dim`` long (last copy truncated)."""
    raw = tokens.shape[-1]
    reps = -(-dim // raw)
    return tokens.repeat(*([1] * (tokens.dim() - 1)), reps)[..., :dim]


def unreplicate(tokens: torch.Tensor, raw: int) -> torch.Tensor:
    """Average the replicated copies of each raw channel."""
    dim = tokens.shape[-1]
    reps = -(-dim // raw)
    pad = reps * raw - dim
    full = torch.cat([tokens, tokens.new_zeros(*tokens.shape[:-1], pad)], dim=-1)
    full = full.reshape(*tokens.shape[:-1], reps, raw).sum(-2)
    counts = torch.full((raw,), float(reps), dtype=tokens.dtype)
    if pad:
        counts[raw - pad:] -= 1
    return full / counts


def _windows(fmap: torch.Tensor, merge: str) -> torch.Tensor:
    """(B,C,G,G) -> (B, n_tokens, raw_dim); window order (0,0),(0,1),(1,0),(1,1)."""
    B, C, G, _ = fmap.shape
    if merge == MERGE_NONE:
        return fmap.flatten(2).transpose(1, 2)
    stride = 2 if merge == MERGE_2X2 else 1
    parts = []
    for dy in (0, 1):
        for dx in (0, 1):
            parts.append(fmap[:, :, dy:G - 1 + dy:stride, dx:G - 1 + dx:stride] if stride == 1
                         else fmap[:, :, dy::2, dx::2])
    win = torch.cat(parts, dim=1)  # (B, 4C, g, g), window position major
    return win.flatten(2).transpose(1, 2)


def tokens_from_maps(maps, layout: ConvTokenLayout) -> torch.Tensor:
    out = []
    for fmap, layer in zip(maps, layout.layers):
        if fmap.shape[1] != layer.channels or fmap.shape[-1] != layer.grid:
            raise ConfigurationError(f"{layer.name}: map {tuple(fmap.shape[1:])} vs layout "
                                     f"({layer.channels}, {layer.grid}, {layer.grid})")
        out.append(replicate(_windows(fmap, layer.merge), layout.padded_dim))
    return torch.cat(out, dim=1)


def extract_conv_tokens(images, extractor, layout: ConvTokenLayout):
    """Per-position conv tokens for a batch, concatenated over layers: (B, N, padded_dim)."""
    from .cross_transformer import FeatureTokenSet

    layout.check(extractor)
    with torch.no_grad():
        maps = extractor(to_tensor(images, layout.input_size, next(extractor.parameters()).dtype))
    return FeatureTokenSet(tokens_from_maps(maps, layout), "conv-layers", {"layout": layout.to_dict()})


def untokenize(tokens, layout: ConvTokenLayout) -> list[torch.Tensor]:
    """Invert the token layout back to (B, C, G, G) maps; overlapping windows are averaged."""
    t = getattr(tokens, "tokens", tokens)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.shape[1] != layout.n_tokens:
        raise ConfigurationError(f"got {t.shape[1]} tokens, layout has {layout.n_tokens}")
    maps = []
    for off, layer in zip(layout.offsets(), layout.layers):
        raw = unreplicate(t[:, off:off + layer.n_tokens], layer.raw_dim)
        B, g, G, C = raw.shape[0], layer.token_grid, layer.grid, layer.channels
        win = raw.transpose(1, 2).reshape(B, raw.shape[-1], g, g)
        if layer.merge == MERGE_NONE:
            maps.append(win)
            continue
        acc = raw.new_zeros(B, C, G, G)
        cnt = raw.new_zeros(1, 1, G, G)
        stride = 2 if layer.merge == MERGE_2X2 else 1
        span = stride * (g - 1) + 1
        for w, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            acc[:, :, dy:dy + span:stride, dx:dx + span:stride] += win[:, w * C:(w + 1) * C]
            cnt[:, :, dy:dy + span:stride, dx:dx + span:stride] += 1
        maps.append(acc / cnt)
    return maps
