"""Brain Interaction Transformer: tokenizer + cross-transformer, batching and checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cross_transformer import CrossTransformer, CrossTransformerConfig
from .tokenizer import BrainTokenizer, subject_key


@dataclass
class BITConfig:
    n_voxels: dict[int, int]
    k: int = 128
    cross: CrossTransformerConfig = field(default_factory=CrossTransformerConfig)
    layout: str = "semantic-grid"
    emb_std: float = 0.02
    seed: int = 0

    @property
    def d(self):
        return self.cross.d

    def to_dict(self):
        out = asdict(self)
        out["n_voxels"] = {str(k): v for k, v in self.n_voxels.items()}
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["n_voxels"] = {int(k): v for k, v in d["n_voxels"].items()}
        d["cross"] = CrossTransformerConfig(**d["cross"])
        return cls(**d)


class BIT(nn.Module):
    def __init__(self, config: BITConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.tokenizer = BrainTokenizer(config.n_voxels, config.k, config.d, config.seed, config.emb_std)
        self.cross = CrossTransformer(config.cross, config.seed)

    def forward(self, activations, voxel_indices, assignment, subject_ids, query_index=None):
        tokens = self.tokenizer(activations, voxel_indices, assignment, subject_ids)
        return self.cross(tokens, query_index)

    def shared_parameters(self):
        return {n: p for n, p in self.named_parameters() if ".voxel_emb." not in f".{n}"}


def make_batch(samples, v2c, n_sample: int | None = None, seed=None, device="cpu"):
    """Stack samples into tokenizer inputs.

    With ``n_sample`` voxels are drawn uniformly with replacement per sample
    (seeded per sample); without it all voxels are used in order, which
    needs a common voxel count across the batch.
    """
    acts, idxs, assign = [], [], []
    for i, s in enumerate(samples):
        if n_sample is None:
            idx = np.arange(s.n_voxels)
        else:
            rng = np.random.default_rng(None if seed is None else [*np.atleast_1d(seed).tolist(), i])
            idx = rng.integers(0, s.n_voxels, size=n_sample)
        acts.append(s.activations[idx])
        idxs.append(idx)
        assign.append(v2c.assignments[s.subject_id][idx])
    return (
        torch.as_tensor(np.stack(acts), device=device),
        torch.as_tensor(np.stack(idxs), device=device),
        torch.as_tensor(np.stack(assign), device=device),
        [s.subject_id for s in samples],
    )


@torch.no_grad()
def predict(model: BIT, samples, v2c, query_index=None, batch_size: int = 64) -> torch.Tensor:
    """Deterministic inference over all voxels; output rows follow ``samples`` order."""
    model.eval()
    out = [None] * len(samples)
    by_subject: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_subject.setdefault(s.subject_id, []).append(i)
    for rows in by_subject.values():
        for j in range(0, len(rows), batch_size):
            chunk = rows[j:j + batch_size]
            batch = make_batch([samples[r] for r in chunk], v2c)
            pred = model(*batch, query_index=query_index)
            for r, p in zip(chunk, pred):
                out[r] = p
    return torch.stack(out)


# ---------------------------------------------------------------------------
# checkpoints: named tensors, voxel embeddings addressable as voxel_emb/subj{n}


def checkpoint_name(param_name: str) -> str:
    if param_name.startswith("tokenizer.voxel_emb."):
        return "voxel_emb/" + param_name.rsplit(".", 1)[1]
    return param_name.replace(".", "/")


def named_tensors(model: BIT) -> dict[str, torch.Tensor]:
    return {checkpoint_name(n): t.detach().clone() for n, t in model.state_dict().items()}


def save_checkpoint(model: BIT, path, extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(named_tensors(model), path / "tensors.pt")
    manifest = {"config": model.config.to_dict(), **(extra or {})}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str))


def load_checkpoint(path) -> tuple[BIT, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    model = BIT(BITConfig.from_dict(manifest["config"]))
    tensors = torch.load(path / "tensors.pt")
    inverse = {checkpoint_name(n): n for n in model.state_dict()}
    for name in tensors:
        if name.startswith("voxel_emb/") and name not in inverse:
            sid = int(name.split("subj")[1])
            model.tokenizer.add_subject(sid, tensors[name].numpy())
            inverse[name] = f"tokenizer.voxel_emb.{subject_key(sid)}"
    model.load_state_dict({inverse[n]: t for n, t in tensors.items()})
    return model, manifest
