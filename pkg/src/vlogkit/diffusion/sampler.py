"""Classifier-free-guided ancestral sampling of one clip."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..backends import Embedding
from ..errors import DomainError, NonFiniteError, ShapeError
from .modes import LATENT_CHANNELS, MaskedContext, assemble_denoiser_input
from .network import Conditioning, Denoiser, predict_noise
from .schedule import DiffusionSchedule, sampling_timesteps


@dataclass(eq=False)
class ConditioningBundle:
    text: Embedding
    actor: Embedding | None = None
    beta: float = 1.0
    guidance_scale: float = 7.5

    def __post_init__(self):
        if self.beta < 0:
            raise DomainError(f"beta must be >= 0, got {self.beta}")
        if self.guidance_scale < 1:
            raise DomainError(f"guidance scale must be >= 1, got {self.guidance_scale}")


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    kind: str = "ddpm"
    beta: float = 1.0


def pad_embeddings(embs: list[Embedding], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length token sequences into ``[B, L, D]`` plus a validity mask."""
    length = max(e.tokens for e in embs)
    dim = embs[0].dim
    values = torch.zeros(len(embs), length, dim, dtype=dtype)
    mask = torch.zeros(len(embs), length, dtype=torch.bool)
    for i, e in enumerate(embs):
        if e.dim != dim:
            raise ShapeError("embeddings in one batch must share a dim")
        values[i, : e.tokens] = torch.from_numpy(e.values).to(dtype)
        mask[i, : e.tokens] = True
    return values, mask


def make_conditioning(texts: list[Embedding], actors: list[Embedding] | None, beta: float,
                      dtype=torch.float32) -> Conditioning:
    text, text_mask = pad_embeddings(texts, dtype)
    if actors is None:
        return Conditioning(text, text_mask, None, None, beta)
    actor, actor_mask = pad_embeddings(actors, dtype)
    return Conditioning(text, text_mask, actor, actor_mask, beta)


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"{tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    if w < 1:
        raise DomainError(f"guidance scale must be >= 1, got {w}")
    if w == 1:
        return eps_cond
    return eps_uncond + w * (eps_cond - eps_uncond)


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(2**62)))


@torch.no_grad()
def sample_clip(
    net: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningBundle,
    ctx: MaskedContext,
    steps: int,
    rng: np.random.Generator,
    kind: str = "ddpm",
) -> torch.Tensor:
    """Denoise a clip from pure noise; the ``ctx.k`` context frames are pasted back at the end."""
    if steps > schedule.T:
        raise DomainError(f"steps={steps} exceeds T={schedule.T}")
    if kind not in ("ddpm", "ddim"):
        raise DomainError(f"unknown sampler {kind!r}")
    dtype = next(net.parameters()).dtype
    shape = ctx.x_k.shape
    if len(shape) != 4 or shape[1] != LATENT_CHANNELS:
        raise ShapeError(f"context must be a single [F, 4, h, w] clip, got {tuple(shape)}")
    gen = torch_generator(rng)
    ctx = MaskedContext(ctx.x_k.to(dtype), ctx.mask.to(dtype), ctx.k)

    w = cond.guidance_scale
    texts = [cond.text]
    actors = None if cond.actor is None else [cond.actor]
    if w != 1:
        texts.append(Embedding.null(cond.text.dim))
        if actors is not None:
            actors.append(Embedding.null(cond.actor.dim))
    c = make_conditioning(texts, actors, cond.beta, dtype)
    batch = len(texts)

    abar = torch.as_tensor(schedule.alphas_cumprod, dtype=torch.float64)
    ts = sampling_timesteps(schedule, steps)
    x = torch.randn(shape, generator=gen, dtype=torch.float64)
    for i, t in enumerate(ts):
        x_in = assemble_denoiser_input(x.to(dtype), ctx)
        eps = predict_noise(net, x_in[None].expand(batch, *x_in.shape), torch.full((batch,), int(t)), c)
        eps = eps.to(torch.float64)
        eps = eps[0] if batch == 1 else cfg_combine(eps[1], eps[0], w)
        a_t = abar[t]
        a_prev = abar[ts[i + 1]] if i + 1 < len(ts) else torch.tensor(1.0, dtype=torch.float64)
        x0 = (x - (1 - a_t).sqrt() * eps) / a_t.sqrt()
        if kind == "ddim":
            x = a_prev.sqrt() * x0 + (1 - a_prev).sqrt() * eps
        else:
            beta_t = 1 - a_t / a_prev
            mean = (a_prev.sqrt() * beta_t * x0 + (a_t / a_prev).sqrt() * (1 - a_prev) * x) / (1 - a_t)
            x = mean
            if i + 1 < len(ts):
                var = beta_t * (1 - a_prev) / (1 - a_t)
                x = x + var.sqrt() * torch.randn(shape, generator=gen, dtype=torch.float64)
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"sampler diverged at t={int(t)}")
    x = x.to(dtype)
    keep = ctx.mask_map.bool().expand_as(x)
    return torch.where(keep, ctx.x_k, x)
