"""Per-source-instance weights from geometry similarity and h/hhat disagreement."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE

from .networks import AdaptationModel, predict_scaled

EPS = 1e-8


class WeightingError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    perplexity: float = 30.0
    pre_reduction_dim: int = 50
    seed: int = 0
    output_dim: int = 2
    method: str = "tsne"

    def __post_init__(self):
        if self.output_dim != 2 or self.method != "tsne":
            raise WeightingError("only 2D t-SNE embeddings are supported")
        if not self.perplexity > 0:
            raise WeightingError("perplexity must be positive")


@dataclass(frozen=True)
class GeometryWeights:
    values: np.ndarray
    embedding_seed: int


@dataclass(frozen=True)
class EngineeringWeights:
    values: np.ndarray
    epoch_computed: int
    disagreement: np.ndarray | None = None


@dataclass(frozen=True)
class CombinedWeights:
    values: np.ndarray
    alpha: float
    beta: float


def min_max_scale(v) -> np.ndarray:
    """Rescale to [0, 1]; a constant vector maps to all ones."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise WeightingError("cannot scale an empty vector")
    if np.isnan(v).any():
        raise WeightingError("NaN in weight vector")
    if not np.isfinite(v).all():
        raise WeightingError("non-finite value in weight vector")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def _flatten(voxels) -> np.ndarray:
    v = np.asarray(voxels)
    return v.reshape(len(v), -1).astype(np.float64)


def embed_points(points: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """PCA pre-reduction followed by 2D t-SNE of the rows of ``points``."""
    n = len(points)
    if n < 3 * cfg.perplexity:
        raise WeightingError(f"{n} points are too few for perplexity {cfg.perplexity} (need >= {3 * cfg.perplexity:g})")
    k = min(cfg.pre_reduction_dim, n - 1, points.shape[1])
    reduced = PCA(n_components=k, random_state=cfg.seed).fit_transform(points) if k < points.shape[1] else points
    tsne = TSNE(n_components=2, perplexity=cfg.perplexity, init="pca", random_state=cfg.seed, method="barnes_hut")
    return tsne.fit_transform(reduced)


def embed_geometry(source_voxels, target_voxels, cfg: EmbeddingConfig) -> tuple[np.ndarray, np.ndarray]:
    """One joint t-SNE fit over sources and target; rows come back in input order."""
    src, tgt = _flatten(source_voxels), _flatten(target_voxels)
    codes = embed_points(np.concatenate([src, tgt], axis=0), cfg)
    return codes[: len(src)], codes[len(src) :]


def geometry_weights(source_codes, target_codes, embedding_seed: int = 0, eps: float = EPS) -> GeometryWeights:
    """Min-max scaled reciprocal distance of each source code to the target centroid."""
    src = np.asarray(source_codes, dtype=np.float64)
    tgt = np.asarray(target_codes, dtype=np.float64)
    if tgt.size == 0:
        raise WeightingError("no target codes")
    if not (np.isfinite(src).all() and np.isfinite(tgt).all()):
        raise WeightingError("non-finite latent codes")
    d = np.linalg.norm(src - tgt.mean(axis=0), axis=1)
    return GeometryWeights(min_max_scale(1.0 / (d + eps)), embedding_seed)


def disagreement(model: AdaptationModel, voxels, masses, batch_size: int = 256) -> np.ndarray:
    """Per-instance mean over the 4 outputs of (h(x) - hhat(x))^2, eval mode."""
    a, b = predict_scaled(model, voxels, masses, batch_size, head=("h", "hhat"))
    return ((a - b) ** 2).mean(axis=1)


def engineering_weights(model: AdaptationModel, voxels, masses, epoch: int = 0, batch_size: int = 256) -> EngineeringWeights:
    disc = disagreement(model, voxels, masses, batch_size)
    return EngineeringWeights(min_max_scale(disc), epoch, disc)


def combine(geo: GeometryWeights, eng: EngineeringWeights, alpha: float, beta: float) -> CombinedWeights:
    g = np.asarray(geo.values, dtype=np.float64)
    e = np.asarray(eng.values, dtype=np.float64)
    if g.shape != e.shape:
        raise WeightingError(f"weight vectors differ in length: {g.shape} vs {e.shape}")
    if alpha < 0 or beta < 0:
        raise WeightingError("alpha and beta must be non-negative")
    if alpha + beta <= 0:
        raise WeightingError("alpha and beta cannot both be zero")
    return CombinedWeights(alpha * e + beta * g, float(alpha), float(beta))


def uniform(n: int) -> np.ndarray:
    return np.ones(n, dtype=np.float64)


def write_weights_csv(path, domain_ids, indices, w_geo, w_eng, omega) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain_id", "index", "w_geo", "w_eng", "omega"])
        for row in zip(domain_ids, indices, w_geo, w_eng, omega):
            w.writerow([row[0], int(row[1]), repr(float(row[2])), repr(float(row[3])), repr(float(row[4]))])
    return path
