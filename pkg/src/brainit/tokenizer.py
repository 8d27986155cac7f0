"""Brain Tokenizer: voxel activations -> one token per functional cluster."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError


def modulate(activations: torch.Tensor, voxel_embeddings: torch.Tensor) -> torch.Tensor:
    """Scale each voxel's embedding row by its scalar activation."""
    if activations.shape[-1] != voxel_embeddings.shape[-2]:
        raise ValueError(
            f"{activations.shape[-1]} activations vs {voxel_embeddings.shape[-2]} embeddings"
        )
    return activations.unsqueeze(-1) * voxel_embeddings


def init_voxel_embeddings(source, d: int | None = None, n_voxels: int | None = None,
                          std: float = 0.02, dtype=torch.float32) -> nn.Parameter:
    """Trainable voxel embeddings, copied from an encoder table or drawn N(0, std^2) from a seed."""
    if isinstance(source, (np.ndarray, torch.Tensor)):
        table = torch.as_tensor(np.asarray(source)).to(dtype)
        if d is not None and table.shape[1] != d:
            raise ConfigurationError(f"encoder embedding dim {table.shape[1]} != model dim {d}")
        return nn.Parameter(table.clone())
    if d is None or n_voxels is None:
        raise ValueError("scratch init needs d and n_voxels")
    gen = torch.Generator().manual_seed(int(source))
    return nn.Parameter(torch.randn(n_voxels, d, generator=gen, dtype=dtype) * std)


def subject_key(subject_id: int) -> str:
    return f"subj{subject_id}"


def cluster_softmax(logits: torch.Tensor, segment: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Softmax of ``logits`` within each segment id (flat 1-D inputs)."""
    seg_max = torch.full((n_segments,), -math.inf, dtype=logits.dtype, device=logits.device)
    seg_max = seg_max.scatter_reduce(0, segment, logits.detach(), reduce="amax")
    ex = torch.exp(logits - seg_max[segment])
    denom = torch.zeros(n_segments, dtype=logits.dtype, device=logits.device).index_add(0, segment, ex)
    return ex / denom[segment]


class BrainTokenizer(nn.Module):
    """Single-head graph attention from each cluster embedding to its own voxels.

    Keys and values are projections of modulated activations, queries are
    projections of cluster embeddings, and attention edges follow the V2C
    assignment only. A cluster with no sampled voxel emits its query.
    """

    def __init__(self, n_voxels: dict[int, int], k: int, d: int, seed: int = 0, emb_std: float = 0.02):
        super().__init__()
        self.k, self.d = k, d
        self.voxel_emb = nn.ParameterDict({
            subject_key(s): init_voxel_embeddings(seed + s, d, v, std=emb_std)
            for s, v in sorted(n_voxels.items())
        })
        gen = torch.Generator().manual_seed(seed)
        self.cluster_emb = nn.Parameter(torch.randn(k, d, generator=gen) * emb_std)
        self.to_q = nn.Linear(d, d)
        self.to_k = nn.Linear(d, d)
        self.to_v = nn.Linear(d, d)

    def add_subject(self, subject_id: int, embeddings):
        self.voxel_emb[subject_key(subject_id)] = init_voxel_embeddings(embeddings, self.d)

    def forward(self, activations, voxel_indices, assignment, subject_ids, return_weights=False):
        """Tokenize a batch.

        activations, voxel_indices, assignment: (B, n); assignment holds the
        cluster of each sampled voxel. subject_ids: length-B sequence.
        Returns (B, K, d).
        """
        B, n = activations.shape
        if assignment.numel() and (int(assignment.min()) < 0 or int(assignment.max()) >= self.k):
            raise ValueError(f"cluster assignment outside [0, {self.k})")
        emb = torch.stack([
            self.voxel_emb[subject_key(int(s))][voxel_indices[b]] for b, s in enumerate(subject_ids)
        ])
        m = modulate(activations.to(emb.dtype), emb)
        keys, values = self.to_k(m), self.to_v(m)
        q = self.to_q(self.cluster_emb)  # (K, d)
        logits = (keys * q[assignment]).sum(-1) / math.sqrt(self.d)  # (B, n)

        segment = (assignment + self.k * torch.arange(B, device=assignment.device)[:, None]).reshape(-1)
        attn = cluster_softmax(logits.reshape(-1), segment, B * self.k)
        pooled = torch.zeros(B * self.k, self.d, dtype=values.dtype, device=values.device)
        pooled = pooled.index_add(0, segment, attn[:, None] * values.reshape(-1, self.d))
        counts = torch.bincount(segment, minlength=B * self.k).reshape(B, self.k, 1)
        tokens = torch.where(counts > 0, pooled.reshape(B, self.k, self.d), q.expand(B, -1, -1))
        if return_weights:
            return tokens, attn.reshape(B, n)
        return tokens
