"""Noise schedules and the closed-form forward process."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import DomainError, ShapeError


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    kind: str
    betas: np.ndarray
    alphas_cumprod: np.ndarray

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def make_schedule(T: int = 1000, kind: str = "scaled_linear", beta_start: float | None = None,
                  beta_end: float | None = None) -> DiffusionSchedule:
    if T < 2:
        raise DomainError(f"a schedule needs T >= 2, got {T}")
    if kind == "linear":
        b0, b1 = beta_start or 1e-4, beta_end or 2e-2
        betas = np.linspace(b0, b1, T, dtype=np.float64)
    elif kind == "scaled_linear":
        b0, b1 = beta_start or 8.5e-4, beta_end or 1.2e-2
        betas = np.linspace(b0**0.5, b1**0.5, T, dtype=np.float64) ** 2
    else:
        raise DomainError(f"unknown schedule kind {kind!r}")
    if not (0 < b0 < b1 < 1):
        raise DomainError("need 0 < beta_start < beta_end < 1")
    return DiffusionSchedule(T, kind, betas, np.cumprod(1.0 - betas))


def _per_sample(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t)
    v = torch.as_tensor(values, dtype=like.dtype)[t.long()]
    # scalar t broadcasts over everything; a vector t indexes the leading batch axis
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Jump straight to step ``t``: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise."""
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    tt = torch.as_tensor(t)
    if tt.min() < 0 or tt.max() >= schedule.T:
        raise DomainError(f"t must lie in [0, {schedule.T})")
    abar = _per_sample(schedule.alphas_cumprod, t, x0)
    return abar.sqrt() * x0 + (1 - abar).sqrt() * noise


def sampling_timesteps(schedule: DiffusionSchedule, steps: int) -> np.ndarray:
    """Descending, evenly strided subset of ``[0, T)`` ending at 0."""
    if not 1 <= steps <= schedule.T:
        raise DomainError(f"steps must lie in [1, {schedule.T}], got {steps}")
    ts = np.linspace(schedule.T - 1, 0, steps).round().astype(np.int64)
    return np.unique(ts)[::-1].copy()
