"""Fréchet distance, embedding cosine scores and PSNR."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .backends import Embedding
from .errors import DomainError, NumericalError, ShapeError

COV_EPS = 1e-6
PSNR_CAP = 99.0


@dataclass(eq=False)
class FeatureSet:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ShapeError(f"cov {self.cov.shape} does not match mean dim {d}")
        if self.n < 2:
            raise DomainError("need at least 2 samples")

    @classmethod
    def from_features(cls, feats) -> "FeatureSet":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2:
            raise ShapeError(f"features must be [n x d], got {feats.shape}")
        if feats.shape[0] < 2:
            raise DomainError("need at least 2 samples")
        return cls(feats.mean(0), np.cov(feats, rowvar=False), feats.shape[0])


def frechet_distance(a: FeatureSet, b: FeatureSet, eps: float = COV_EPS) -> float:
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"feature dims differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    d = a.mean.shape[0]
    diff = a.mean - b.mean
    # eps*I on both sides keeps sqrtm away from singular products; it cancels in the trace
    ca = a.cov + eps * np.eye(d)
    cb = b.cov + eps * np.eye(d)
    covmean = linalg.sqrtm(ca @ cb)
    if not np.isfinite(covmean).all():
        raise NumericalError("matrix square root failed")
    if np.iscomplexobj(covmean):
        if np.abs(covmean.imag).max() > 1e-6 * max(1.0, np.abs(covmean.real).max()):
            raise NumericalError(f"matrix square root has imaginary part {np.abs(covmean.imag).max():.3g}")
        covmean = covmean.real
    value = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2 * np.trace(covmean))
    return max(value, 0.0)


def _vec(e) -> np.ndarray:
    """Pool a token sequence to one vector."""
    values = e.values if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)
    return np.asarray(values, dtype=np.float64).reshape(-1, np.shape(values)[-1]).mean(0)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_text_video(text_emb, frame_embs: Sequence) -> float:
    """Mean cosine between the pooled text embedding and each frame embedding."""
    if not len(frame_embs):
        raise DomainError("no frame embeddings")
    t = _vec(text_emb)
    return float(np.mean([_cos(t, _vec(f)) for f in frame_embs]))


def cosine_image_video(ref_emb, frame_embs: Sequence) -> float:
    return cosine_text_video(ref_emb, frame_embs)


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


@dataclass
class MetricReport:
    metric: str
    value: float
    n_samples: int
    embedder_id: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path
