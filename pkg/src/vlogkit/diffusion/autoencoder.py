"""Toy latent codec between RGB frames and 4-channel latents."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..errors import ShapeError
from .modes import LATENT_CHANNELS


class PatchAutoencoder(nn.Module):
    """Linear patch codec.

    Frames are cut into ``factor x factor`` patches (space-to-depth) and each
    patch is projected to 4 latent channels by a 1x1 convolution; the decoder
    mirrors it and clamps to [0, 1]. :meth:`fit` sets the projections to the
    whitened principal components of a frame collection, which is the optimal
    linear codec under squared error and leaves latents with unit variance.

    ``identity=True`` (factor 1 only) stores RGB plus a zero fourth channel, so
    ``decode(encode(x)) == x`` bit for bit.
    """

    def __init__(self, factor: int = 8, identity: bool = False):
        super().__init__()
        if identity and factor != 1:
            raise ValueError("identity mode requires factor 1")
        self.factor = factor
        self.identity = identity
        d = 3 * factor * factor
        self.encoder = nn.Conv2d(d, LATENT_CHANNELS, 1)
        self.decoder = nn.Conv2d(LATENT_CHANNELS, d, 1)

    def _check(self, frames: torch.Tensor) -> None:
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"frames must be [F x 3 x H x W], got {tuple(frames.shape)}")
        if frames.shape[2] % self.factor or frames.shape[3] % self.factor:
            raise ShapeError(f"frame size {tuple(frames.shape[2:])} not divisible by factor {self.factor}")

    @torch.no_grad()
    def encode(self, frames) -> torch.Tensor:
        frames = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames,
                                 dtype=self.encoder.weight.dtype)
        self._check(frames)
        if self.identity:
            return torch.cat([frames, torch.zeros_like(frames[:, :1])], dim=1)
        return self.encoder(F.pixel_unshuffle(frames, self.factor))

    @torch.no_grad()
    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 4 or latents.shape[1] != LATENT_CHANNELS:
            raise ShapeError(f"latents must be [F x 4 x h x w], got {tuple(latents.shape)}")
        if self.identity:
            return latents[:, :3].clone()
        return F.pixel_shuffle(self.decoder(latents), self.factor).clamp(0.0, 1.0)

    @torch.no_grad()
    def fit(self, frames, floor: float = 1e-4) -> "PatchAutoencoder":
        """Fit the codec to ``frames`` ([N x 3 x H x W]) by PCA on patches."""
        if self.identity:
            return self
        frames = torch.as_tensor(np.asarray(frames), dtype=torch.float64)
        self._check(frames)
        patches = F.pixel_unshuffle(frames, self.factor).permute(0, 2, 3, 1).reshape(-1, 3 * self.factor**2)
        mean = patches.mean(0)
        cov = torch.cov((patches - mean).T)
        evals, evecs = torch.linalg.eigh(cov)
        evals, evecs = evals.flip(0)[:LATENT_CHANNELS], evecs.flip(1)[:, :LATENT_CHANNELS]
        scale = evals.clamp_min(floor).sqrt()
        # fix eigenvector signs so the fit is reproducible across LAPACK builds
        sign = torch.sign(evecs[evecs.abs().argmax(0), torch.arange(LATENT_CHANNELS)])
        evecs = evecs * sign
        enc_w = (evecs / scale).T
        dtype = self.encoder.weight.dtype
        self.encoder.weight.copy_(enc_w[:, :, None, None].to(dtype))
        self.encoder.bias.copy_((-enc_w @ mean).to(dtype))
        self.decoder.weight.copy_((evecs * scale)[:, :, None, None].to(dtype))
        self.decoder.bias.copy_(mean.to(dtype))
        return self
