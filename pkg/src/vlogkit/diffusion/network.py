"""Denoising U-Net built from spatio-temporal blocks.

Each block runs, in order:

    x_cv = ResBlock(x, t_emb)                         spatial conv + step embedding
    x_sa = x_cv + SelfAttn_spatial(x_cv)              per frame, over h*w tokens
    x_ca = x_sa + CrossAttn_spatial(x_sa, text)
    y_ca = CrossAttn_actor(x_sa, actor)
    z_se = x_ca + beta * y_ca
    z_sa = z_se + SelfAttn_temporal(z_se)             per position, over F frames
    z_ca = z_sa + CrossAttn_temporal(z_sa, text)

The two temporal sublayers are skipped for single-frame (image) inputs, and
the actor branch is skipped when there is no actor or ``beta == 0``. All
attention output projections start at zero, so a fresh block reduces to its
ResBlock.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from ..errors import NonFiniteError, ShapeError
from .modes import DENOISER_IN_CHANNELS, LATENT_CHANNELS


@dataclass
class NetConfig:
    width: int = 64
    heads: int = 2
    levels: int = 2
    text_dim: int = 64
    actor_dim: int = 64
    max_frames: int = 64
    out_init_scale: float = 0.1
    spatial_pos: bool = True
    # what the raw output estimates: "eps" (the noise) or "v" (sqrt(abar)*eps - sqrt(1-abar)*x0)
    prediction: str = "v"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Conditioning:
    """Batched conditioning tensors.

    ``text`` is ``[B, L, text_dim]`` with boolean ``text_mask`` ``[B, L]``;
    ``actor``/``actor_mask`` likewise, or ``None`` when no actor is shown.
    """

    text: torch.Tensor
    text_mask: torch.Tensor
    actor: torch.Tensor | None = None
    actor_mask: torch.Tensor | None = None
    beta: float = 1.0

    def repeat(self, n: int) -> "Conditioning":
        """Repeat every batch row ``n`` times (row-major, like ``repeat_interleave``)."""
        rep = lambda t: None if t is None else t.repeat_interleave(n, dim=0)  # noqa: E731
        return Conditioning(rep(self.text), rep(self.text_mask), rep(self.actor), rep(self.actor_mask), self.beta)


def sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = positions.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([args.sin(), args.cos()], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def grid_positions(h: int, w: int, dim: int) -> torch.Tensor:
    """``[h*w, dim]`` code: half the channels encode the row, half the column."""
    rows = sinusoidal(torch.arange(h).repeat_interleave(w), dim // 2)
    cols = sinusoidal(torch.arange(w).repeat(h), dim - dim // 2)
    return torch.cat([rows, cols], dim=1)


def _groups(width: int) -> int:
    return 8 if width % 8 == 0 else 1


class Attention(nn.Module):
    """Pre-norm multi-head attention returning only the residual update."""

    def __init__(self, dim: int, context_dim: int | None = None, heads: int = 2):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim or dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim or dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(self, x, context=None, context_mask=None, pos=None):
        h = self.norm(x)
        if pos is not None:
            h = h + pos
        ctx = h if context is None else context
        n, lq, d = h.shape
        hd = d // self.heads
        q = self.to_q(h).view(n, lq, self.heads, hd).transpose(1, 2)
        k = self.to_k(ctx).view(n, ctx.shape[1], self.heads, hd).transpose(1, 2)
        v = self.to_v(ctx).view(n, ctx.shape[1], self.heads, hd).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if context_mask is not None:
            logits = logits.masked_fill(~context_mask[:, None, None, :], float("-inf"))
        out = logits.softmax(dim=-1) @ v
        return self.to_out(out.transpose(1, 2).reshape(n, lq, d))


class ResBlock(nn.Module):
    def __init__(self, width: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(width), width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.temb = nn.Linear(temb_dim, width)
        self.norm2 = nn.GroupNorm(_groups(width), width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class SpatioTemporalBlock(nn.Module):
    def __init__(self, width: int, temb_dim: int, cfg: NetConfig):
        super().__init__()
        self.res = ResBlock(width, temb_dim)
        self.spatial_self = Attention(width, heads=cfg.heads)
        self.spatial_text = Attention(width, cfg.text_dim, cfg.heads)
        self.spatial_actor = Attention(width, cfg.actor_dim, cfg.heads)
        self.temporal_self = Attention(width, heads=cfg.heads)
        self.temporal_text = Attention(width, cfg.text_dim, cfg.heads)
        self.register_buffer("frame_pos", sinusoidal(torch.arange(cfg.max_frames), width).float(), persistent=False)
        self.spatial_pos = cfg.spatial_pos

    def spatial(self, x, temb, cond: Conditioning, use_actor: bool = True):
        """Spatial half; returns ``(z_se, x_ca, y_ca)`` as ``[B*F, h*w, C]`` tokens."""
        b, f, c, h, w = x.shape
        x_cv = self.res(x.reshape(b * f, c, h, w), temb.repeat_interleave(f, dim=0))
        x_sa = x_cv.flatten(2).transpose(1, 2)
        pos = grid_positions(h, w, c).to(x_sa.dtype) if self.spatial_pos else None
        x_sa = x_sa + self.spatial_self(x_sa, pos=pos)
        per_frame = cond.repeat(f)
        x_ca = x_sa + self.spatial_text(x_sa, per_frame.text, per_frame.text_mask)
        if use_actor and cond.actor is not None and cond.beta != 0:
            y_ca = self.spatial_actor(x_sa, per_frame.actor, per_frame.actor_mask)
            return x_ca + cond.beta * y_ca, x_ca, y_ca
        return x_ca, x_ca, None

    def temporal(self, z_se, shape, cond: Conditioning):
        b, f, c, h, w = shape
        z = z_se.reshape(b, f, h * w, c).permute(0, 2, 1, 3).reshape(b * h * w, f, c)
        pos = self.frame_pos[:f].to(z.dtype)
        per_pos = cond.repeat(h * w)
        z = z + self.temporal_self(z, pos=pos)
        z = z + self.temporal_text(z, per_pos.text, per_pos.text_mask, pos=pos)
        return z.reshape(b, h * w, f, c).permute(0, 2, 1, 3)

    def forward(self, x, temb, cond: Conditioning, use_actor: bool = True):
        b, f, c, h, w = x.shape
        if f > self.frame_pos.shape[0]:
            raise ShapeError(f"clip of {f} frames exceeds max_frames={self.frame_pos.shape[0]}")
        z_se, _, _ = self.spatial(x, temb, cond, use_actor)
        if f == 1:
            out = z_se.reshape(b, f, h * w, c)
        else:
            out = self.temporal(z_se, x.shape, cond)
        return out.transpose(2, 3).reshape(b, f, c, h, w)


class Denoiser(nn.Module):
    """U-Net on ``[B, F, 9, h, w]`` inputs.

    The raw output is either the noise or the velocity target, depending on
    ``cfg.prediction``; :func:`predict_noise` always hands back the noise.
    """

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        if cfg.prediction not in ("eps", "v"):
            raise ValueError(f"unknown prediction target {cfg.prediction!r}")
        self.register_buffer("alphas_cumprod", torch.empty(0, dtype=torch.float64), persistent=False)
        w = cfg.width
        temb_dim = 4 * w
        self.conv_in = nn.Conv2d(DENOISER_IN_CHANNELS, w, 3, padding=1)
        with torch.no_grad():
            # context and mask channels start silent; the net begins as a plain text-to-video model
            self.conv_in.weight[:, LATENT_CHANNELS:].zero_()
        self.time_mlp = nn.Sequential(nn.Linear(w, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.down = nn.ModuleList(SpatioTemporalBlock(w, temb_dim, cfg) for _ in range(cfg.levels))
        self.downsample = nn.ModuleList(nn.Conv2d(w, w, 3, stride=2, padding=1) for _ in range(cfg.levels - 1))
        self.upsample = nn.ModuleList(nn.Conv2d(w, w, 3, padding=1) for _ in range(cfg.levels - 1))
        self.merge = nn.ModuleList(nn.Conv2d(2 * w, w, 1) for _ in range(cfg.levels - 1))
        self.up = nn.ModuleList(SpatioTemporalBlock(w, temb_dim, cfg) for _ in range(cfg.levels - 1))
        self.out_norm = nn.GroupNorm(_groups(w), w)
        self.conv_out = nn.Conv2d(w, LATENT_CHANNELS, 3, padding=1)
        with torch.no_grad():
            self.conv_out.weight.mul_(cfg.out_init_scale)
            self.conv_out.bias.zero_()

    def blocks(self):
        return [*self.down, *self.up]

    def attach_schedule(self, alphas_cumprod) -> None:
        self.alphas_cumprod = torch.as_tensor(alphas_cumprod, dtype=torch.float64).clone()

    def _abar(self, t, like: torch.Tensor) -> torch.Tensor:
        if not len(self.alphas_cumprod):
            raise ShapeError("velocity prediction needs attach_schedule() first")
        a = self.alphas_cumprod[torch.as_tensor(t).long().reshape(-1)].to(like.dtype)
        return a.reshape(-1, *(1,) * (like.ndim - 1))

    def target(self, noise: torch.Tensor, x0: torch.Tensor, t) -> torch.Tensor:
        """Regression target for the raw output."""
        if self.cfg.prediction == "eps":
            return noise
        a = self._abar(t, x0)
        return a.sqrt() * noise - (1 - a).sqrt() * x0

    def to_noise(self, raw: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
        if self.cfg.prediction == "eps":
            return raw
        a = self._abar(t, x_t)
        return (1 - a).sqrt() * x_t + a.sqrt() * raw

    def forward(self, x_in: torch.Tensor, t: torch.Tensor, cond: Conditioning) -> torch.Tensor:
        if x_in.ndim != 5 or x_in.shape[2] != DENOISER_IN_CHANNELS:
            raise ShapeError(f"denoiser input must be [B, F, {DENOISER_IN_CHANNELS}, h, w], got {tuple(x_in.shape)}")
        b, f, _, h, w = x_in.shape
        if h % 2 ** (self.cfg.levels - 1) or w % 2 ** (self.cfg.levels - 1):
            raise ShapeError(f"latent size {h}x{w} not divisible by 2**{self.cfg.levels - 1}")
        temb = self.time_mlp(sinusoidal(torch.as_tensor(t).reshape(-1).expand(b), self.cfg.width).to(x_in.dtype))

        def frames(fn, z):
            bf = fn(z.reshape(b * f, *z.shape[2:]))
            return bf.reshape(b, f, *bf.shape[1:])

        z = frames(self.conv_in, x_in)
        skips = []
        for i, block in enumerate(self.down):
            z = block(z, temb, cond)
            if i < len(self.downsample):
                skips.append(z)
                z = frames(self.downsample[i], z)
        for i, block in enumerate(self.up):
            up_conv = self.upsample[-1 - i]
            z = frames(lambda y: up_conv(F.interpolate(y, scale_factor=2, mode="nearest")), z)
            z = frames(self.merge[-1 - i], torch.cat([z, skips.pop()], dim=2))
            z = block(z, temb, cond)
        return frames(lambda y: self.conv_out(F.silu(self.out_norm(y))), z)


def predict_noise(net: Denoiser, x_in: torch.Tensor, t, cond: Conditioning) -> torch.Tensor:
    """Noise estimate for one clip (``[F, 9, h, w]``) or a batch (``[B, F, 9, h, w]``)."""
    single = x_in.ndim == 4
    if single:
        x_in = x_in[None]
    if x_in.shape[-3] != DENOISER_IN_CHANNELS:
        raise ShapeError(f"expected {DENOISER_IN_CHANNELS} input channels, got {x_in.shape[-3]}")
    eps = net.to_noise(net(x_in, t, cond), x_in[:, :, :LATENT_CHANNELS], t)
    if not torch.isfinite(eps).all():
        raise NonFiniteError("denoiser produced non-finite values")
    return eps[0] if single else eps


def temporal_parameters(net: Denoiser) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in net.named_parameters() if ".temporal_" in n]


def actor_parameters(net: Denoiser) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in net.named_parameters() if ".spatial_actor." in n]
