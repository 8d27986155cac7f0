"""Voxels-to-Clusters mapping: a diagonal Gaussian mixture over pooled voxel embeddings."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.cluster import kmeans_plusplus

from .errors import ConfigurationError, GmmDegenerateError

log = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)


@dataclass
class GmmConfig:
    k: int = 128
    covariance: str = "diag"
    max_iter: int = 100
    tol: float = 1e-5
    var_floor: float = 1e-6
    max_retries: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.covariance != "diag":
            raise ValueError("only diagonal covariances are supported")


@dataclass
class V2CMapping:
    k: int
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d) diagonal covariances
    weights: np.ndarray  # (k,)
    assignments: dict[int, np.ndarray] = field(default_factory=dict)
    covariance: str = "diag"
    mode: str = "functional"
    log_likelihood: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        """log(weight_k) + log N(x | mean_k, diag var_k), shape (n, k)."""
        return _log_joint(np.asarray(x, dtype=np.float64), self.means, self.variances, self.weights)

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        header = {
            "k": self.k,
            "dim": self.dim,
            "covariance": self.covariance,
            "mode": self.mode,
            "subjects": {str(s): int(a.shape[0]) for s, a in sorted(self.assignments.items())},
            "log_likelihood": self.log_likelihood,
        }
        (path / "header.json").write_text(json.dumps(header, indent=1))
        np.save(path / "means.npy", self.means)
        np.save(path / "variances.npy", self.variances)
        np.save(path / "weights.npy", self.weights)
        for s, a in self.assignments.items():
            np.save(path / f"assign_subj{s}.npy", a.astype(np.int64))

    @classmethod
    def load(cls, path) -> "V2CMapping":
        path = Path(path)
        h = json.loads((path / "header.json").read_text())
        return cls(
            k=h["k"],
            means=np.load(path / "means.npy"),
            variances=np.load(path / "variances.npy"),
            weights=np.load(path / "weights.npy"),
            assignments={int(s): np.load(path / f"assign_subj{s}.npy") for s in h["subjects"]},
            covariance=h["covariance"],
            mode=h["mode"],
            log_likelihood=h.get("log_likelihood", []),
        )


def _log_joint(x, means, variances, weights):
    prec = 1.0 / variances
    # sum_j (x_j - mu_kj)^2 / var_kj, expanded to avoid an (n, k, d) temporary
    maha = (x**2) @ prec.T - 2.0 * x @ (means * prec).T + np.sum(means**2 * prec, axis=1)
    log_det = np.sum(np.log(variances), axis=1)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w - 0.5 * (x.shape[1] * LOG_2PI + log_det + maha)


def _logsumexp(a):
    m = np.max(a, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


def _em(x, cfg: GmmConfig, seed: int):
    n, d = x.shape
    floor = max(cfg.var_floor * float(np.mean(np.var(x, axis=0))), 1e-12)
    centers, _ = kmeans_plusplus(x, cfg.k, random_state=seed)
    means = centers.astype(np.float64)
    variances = np.tile(np.maximum(np.var(x, axis=0), floor), (cfg.k, 1))
    weights = np.full(cfg.k, 1.0 / cfg.k)
    trace = []
    for it in range(cfg.max_iter):
        lj = _log_joint(x, means, variances, weights)
        lse = _logsumexp(lj)
        ll = float(np.mean(lse))
        if not np.isfinite(ll):
            raise GmmDegenerateError(f"non-finite log-likelihood at iteration {it}")
        trace.append(ll)
        resp = np.exp(lj - lse[:, None])
        nk = resp.sum(axis=0)
        alive = nk > 1e-10
        weights = nk / n
        safe = np.where(alive, nk, 1.0)[:, None]
        new_means = (resp.T @ x) / safe
        new_vars = (resp.T @ (x**2)) / safe - new_means**2
        # components with no responsibility keep their parameters (weight is already 0)
        means = np.where(alive[:, None], new_means, means)
        variances = np.where(alive[:, None], np.maximum(new_vars, floor), variances)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= cfg.tol * max(1.0, abs(trace[-1])):
            break
    lj = _log_joint(x, means, variances, weights)
    trace.append(float(np.mean(_logsumexp(lj))))
    if not np.isfinite(trace[-1]):
        raise GmmDegenerateError("non-finite final log-likelihood")
    collapsed = np.all(variances <= floor, axis=1) & (weights * n >= 2)
    if np.any(collapsed) and np.any(np.var(x, axis=0) > 10 * floor):
        raise GmmDegenerateError(f"components {np.flatnonzero(collapsed).tolist()} collapsed")
    return means, variances, weights, trace


def _fit(tables: dict[int, np.ndarray], cfg: GmmConfig, mode: str) -> V2CMapping:
    if not tables:
        raise ValueError("no subjects given")
    dims = {t.shape[1] for t in tables.values()}
    if len(dims) != 1:
        raise ConfigurationError(f"embedding dims differ across subjects: {sorted(dims)}")
    subjects = sorted(tables)
    x = np.concatenate([np.asarray(tables[s], dtype=np.float64) for s in subjects])
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain NaN/Inf")
    if cfg.k > x.shape[0]:
        raise ValueError(f"k={cfg.k} exceeds the {x.shape[0]} pooled rows")
    err = None
    for attempt in range(cfg.max_retries + 1):
        try:
            means, variances, weights, trace = _em(x, cfg, cfg.seed + attempt)
            break
        except GmmDegenerateError as e:
            log.warning("GMM attempt %d degenerate (%s); re-seeding", attempt, e)
            err = e
    else:
        raise GmmDegenerateError(f"EM failed after {cfg.max_retries + 1} attempts") from err
    mapping = V2CMapping(cfg.k, means, variances, weights, mode=mode, log_likelihood=trace)
    for s in subjects:
        mapping.assignments[s] = assign_new_subject(mapping, tables[s])
    return mapping


def fit_v2c(embeddings: dict[int, np.ndarray], config: GmmConfig) -> V2CMapping:
    """Fit the shared mixture on all subjects' voxel embeddings and assign every voxel."""
    return _fit(embeddings, config, "functional")


def fit_anatomical_v2c(coords: dict[int, np.ndarray], config: GmmConfig) -> V2CMapping:
    """Baseline mapping that clusters voxels by their 3D coordinates."""
    for s, c in coords.items():
        if np.asarray(c).ndim != 2 or np.asarray(c).shape[1] != 3:
            raise ValueError(f"subject {s}: coordinates must be (V, 3)")
    return _fit(coords, config, "anatomical")


def assign_new_subject(mapping: V2CMapping, embeddings: np.ndarray) -> np.ndarray:
    """Maximum-responsibility cluster per row; ties go to the lowest index."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != mapping.dim:
        raise ConfigurationError(f"embedding dim {e.shape[-1]} != mapping dim {mapping.dim}")
    return np.argmax(mapping.log_joint(e), axis=1).astype(np.int64)
