"""Mode selection and masked-context construction.

A clip is denoised while ``k`` of its clean frames are shown to the network as
context: ``k == 0`` is plain text-to-video generation, ``k > 0`` continues an
existing clip. During training ``k`` is drawn from a truncated geometric law

    P(k) = alpha**k - alpha**(k+1)   for k < m
    P(m) = alpha**m

which telescopes to one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import DomainError, ShapeError

LATENT_CHANNELS = 4
DENOISER_IN_CHANNELS = 2 * LATENT_CHANNELS + 1


@dataclass(frozen=True)
class ModeSelector:
    alpha: float = 0.6
    m: int = 6

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.m < 0:
            raise DomainError(f"m must be >= 0, got {self.m}")


def pmf(selector: ModeSelector) -> np.ndarray:
    k = np.arange(selector.m + 1, dtype=np.float64)
    p = selector.alpha**k - selector.alpha ** (k + 1)
    p[-1] = selector.alpha**selector.m
    return p


def sample_k(selector: ModeSelector, rng: np.random.Generator, size: int | None = None):
    if selector.m == 0:
        return 0 if size is None else np.zeros(size, dtype=np.int64)
    # inverse CDF on one uniform per draw keeps the stream layout independent of m
    cdf = np.cumsum(pmf(selector))
    u = rng.random(size)
    k = np.minimum(np.searchsorted(cdf, u, side="right"), selector.m)
    return int(k) if size is None else k.astype(np.int64)


@dataclass(frozen=True, eq=False)
class MaskedContext:
    """Clean context frames plus their frame mask.

    ``x_k`` is ``[..., F, C, H, W]``; ``mask`` is ``[..., F]`` with ones on the
    preserved frames; ``k`` is the preserved-frame count (an int, or a tensor
    of per-sample counts for batches).
    """

    x_k: torch.Tensor
    mask: torch.Tensor
    k: int | torch.Tensor

    @property
    def mask_map(self) -> torch.Tensor:
        *lead, f, _, h, w = self.x_k.shape
        return self.mask[..., None, None, None].expand(*lead, f, 1, h, w)


def frame_mask(frames: int, k, dtype=torch.float32) -> torch.Tensor:
    """``[F]`` (or ``[B, F]`` for a vector of k) mask with ones on the first k frames."""
    k = torch.as_tensor(k)
    idx = torch.arange(frames)
    return (idx < k[..., None]).to(dtype) if k.ndim else (idx < k).to(dtype)


def build_masked_context(x_clean: torch.Tensor, k) -> MaskedContext:
    frames = x_clean.shape[-4]
    kt = torch.as_tensor(k)
    if kt.min() < 0 or kt.max() > frames:
        raise DomainError(f"k must lie in [0, {frames}], got {k}")
    mask = frame_mask(frames, kt, dtype=x_clean.dtype)
    if kt.ndim and mask.shape[:-1] != x_clean.shape[:-4]:
        raise ShapeError("one k per batch element expected")
    return MaskedContext(x_clean * mask[..., None, None, None], mask, k)


def assemble_denoiser_input(x_noise: torch.Tensor, ctx: MaskedContext) -> torch.Tensor:
    """Channel layout ``[noisy latent (4) | context latent (4) | mask (1)]``."""
    if x_noise.shape != ctx.x_k.shape:
        raise ShapeError(f"noisy latent {tuple(x_noise.shape)} vs context {tuple(ctx.x_k.shape)}")
    if x_noise.shape[-3] != LATENT_CHANNELS:
        raise ShapeError(f"expected {LATENT_CHANNELS} latent channels, got {x_noise.shape[-3]}")
    return torch.cat([x_noise, ctx.x_k, ctx.mask_map.to(x_noise.dtype)], dim=-3)


def split_denoiser_input(x_in: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    c = LATENT_CHANNELS
    return x_in[..., :c, :, :], x_in[..., c : 2 * c, :, :], x_in[..., 2 * c :, :, :]
