"""Cross-Transformer: brain-token self-attention plus query-token cross-attention."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn


@dataclass
class CrossTransformerConfig:
    blocks: int = 5
    heads: int = 8
    d: int = 512
    d_out: int = 512
    n_queries: int = 256
    ff_mult: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.blocks < 0 or self.n_queries < 1 or self.d_out < 1:
            raise ValueError("invalid cross-transformer config")

    def to_dict(self):
        return asdict(self)


@dataclass
class FeatureTokenSet:
    """Predicted feature tokens, (Q, D) or batched (B, Q, D), plus a layout tag."""

    tokens: torch.Tensor
    layout: str = "semantic-grid"
    meta: dict = field(default_factory=dict)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (d // heads) ** -0.5
        self.to_q = nn.Linear(d, d)
        self.to_k = nn.Linear(d, d)
        self.to_v = nn.Linear(d, d)
        self.to_out = nn.Linear(d, d)

    def forward(self, x, context):
        B, n, d = x.shape
        h = self.heads

        def split(t):
            return t.reshape(B, t.shape[1], h, d // h).transpose(1, 2)

        q, k, v = split(self.to_q(x)), split(self.to_k(context)), split(self.to_v(context))
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, n, d)
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, d * mult), nn.GELU(), nn.Linear(d * mult, d))

    def forward(self, x):
        return self.net(x)


class Block(nn.Module):
    def __init__(self, d, heads, ff_mult):
        super().__init__()
        self.norm_sa = nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.norm_ff_tok = nn.LayerNorm(d)
        self.ff_tok = FeedForward(d, ff_mult)
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.cross_attn = Attention(d, heads)
        self.norm_ff_q = nn.LayerNorm(d)
        self.ff_q = FeedForward(d, ff_mult)

    def forward(self, h, tokens):
        t = self.norm_sa(tokens)
        tokens = tokens + self.self_attn(t, t)
        tokens = tokens + self.ff_tok(self.norm_ff_tok(tokens))
        h = h + self.cross_attn(self.norm_q(h), self.norm_kv(tokens))
        h = h + self.ff_q(self.norm_ff_q(h))
        return h, tokens


class CrossTransformer(nn.Module):
    def __init__(self, config: CrossTransformerConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed + 10_000)
        self.queries = nn.Parameter(torch.randn(config.n_queries, config.d, generator=gen) * 0.02)
        self.first_cross = Attention(config.d, config.heads)
        self.blocks = nn.ModuleList(
            Block(config.d, config.heads, config.ff_mult) for _ in range(config.blocks)
        )
        self.proj = nn.Linear(config.d, config.d_out)

    def forward(self, tokens: torch.Tensor, query_index: torch.Tensor | None = None) -> torch.Tensor:
        """tokens (B, K, d) -> features (B, Q, d_out).

        Queries never attend to each other, so ``query_index`` evaluates just a
        subset of output positions at the same cost per position.
        """
        if tokens.shape[-1] != self.config.d:
            raise ValueError(f"token dim {tokens.shape[-1]} != config d {self.config.d}")
        q = self.queries if query_index is None else self.queries[query_index]
        h = self.first_cross(q.unsqueeze(0).expand(tokens.shape[0], -1, -1), tokens)
        for block in self.blocks:
            h, tokens = block(h, tokens)
        return self.proj(h)


def decode(tokens: torch.Tensor, model: CrossTransformer, layout: str = "semantic-grid") -> FeatureTokenSet:
    squeeze = tokens.dim() == 2
    out = model(tokens.unsqueeze(0) if squeeze else tokens)
    return FeatureTokenSet(out[0] if squeeze else out, layout)


def _linear(i, o):
    return i * o + o


def count_parameters(config: CrossTransformerConfig, k: int) -> int:
    """Shared trainable parameters of a BIT model: everything except voxel embeddings."""
    d, f = config.d, config.d * config.ff_mult
    attn = 4 * _linear(d, d)
    ff = _linear(d, f) + _linear(f, d)
    norm = 2 * d
    tokenizer = k * d + 3 * _linear(d, d)
    block = 2 * attn + 2 * ff + 5 * norm
    return (tokenizer + config.n_queries * d + attn + config.blocks * block
            + _linear(d, config.d_out))
