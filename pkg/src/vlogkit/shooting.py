"""Per-scene autoregressive shooting and overlap-aware stitching.

The first clip of a scene is sampled in generation mode (no context frames,
actor conditioning on). Each later clip is sampled in prediction mode from the
last ``k`` latents of the previous clip, without the actor, until the scene's
scheduled frame count is covered; the stitched result is trimmed from the tail.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .backends import BackendDescriptor, Embedding, Kind, build_backend, embed_image, embed_text, resolve
from .diffusion.model import VideoModel
from .diffusion.modes import LATENT_CHANNELS, build_masked_context
from .diffusion.sampler import ConditioningBundle, SamplerConfig, sample_clip
from .errors import DomainError, ShapeError
from .planning import FPS, Scene, seconds_to_frames

log = logging.getLogger(__name__)

SNIPPET_MANIFEST = "snippet.json"


@dataclass(frozen=True)
class ShootPlan:
    frames_needed: int
    clip_len: int
    k: int
    clip_count: int

    @property
    def new_frames_per_step(self) -> int:
        return self.clip_len - self.k

    @property
    def total_frames(self) -> int:
        """Unique frames produced before trimming."""
        return self.clip_len + (self.clip_count - 1) * self.new_frames_per_step


def plan_clip_schedule(frames_needed: int, clip_len: int, k: int) -> ShootPlan:
    if clip_len < 2:
        raise DomainError(f"clip_len must be >= 2, got {clip_len}")
    if not 0 < k < clip_len:
        raise DomainError(f"need 0 < k < clip_len, got k={k}, clip_len={clip_len}")
    if frames_needed < 1:
        raise DomainError(f"frames_needed must be >= 1, got {frames_needed}")
    if frames_needed <= clip_len:
        j = 1
    else:
        j = 1 + math.ceil((frames_needed - clip_len) / (clip_len - k))
    return ShootPlan(frames_needed, clip_len, k, j)


def stitch(clips: Sequence, k: int):
    """``clip_1 ++ clip_2[k:] ++ ... ++ clip_J[k:]`` for numpy arrays or tensors."""
    if not clips:
        raise ShapeError("nothing to stitch")
    geom = tuple(clips[0].shape[1:])
    for c in clips:
        if tuple(c.shape[1:]) != geom:
            raise ShapeError(f"clip geometry {tuple(c.shape[1:])} differs from {geom}")
        if c.shape[0] <= k:
            raise ShapeError(f"clip of {c.shape[0]} frames cannot overlap by k={k}")
    parts = [clips[0]] + [c[k:] for c in clips[1:]]
    if torch.is_tensor(clips[0]):
        return torch.cat(parts)
    return np.concatenate(parts)


@dataclass
class ClipRecord:
    """What one sampler call saw; kept for instrumentation."""
    index: int
    k: int
    actor: bool
    latents: torch.Tensor


@dataclass(eq=False)
class Snippet:
    frames: np.ndarray  # [F_total, 3, H, W]
    scene_ref: int
    clips: list[ClipRecord] = field(default_factory=list)

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])


def shoot_scene(
    model: VideoModel,
    scene: Scene,
    actor_frame: np.ndarray | None = None,
    k: int = 1,
    sampler_cfg: SamplerConfig | None = None,
    rng: np.random.Generator | None = None,
    text_backend=None,
    image_backend=None,
    fps: float = FPS,
) -> Snippet:
    """Shoot one scene to exactly ``ceil(duration * fps)`` frames.

    Every clip is conditioned on the same scene description.
    """
    if scene.duration_seconds is None:
        raise DomainError(f"scene {scene.fragment_id} has no scheduled duration")
    sampler_cfg = sampler_cfg or SamplerConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    net_cfg = model.config.net
    text_backend = resolve(text_backend or BackendDescriptor(Kind.TEXT_EMBEDDER, dim=net_cfg.text_dim),
                           Kind.TEXT_EMBEDDER)
    image_backend = resolve(image_backend or BackendDescriptor(Kind.IMAGE_EMBEDDER, dim=net_cfg.actor_dim),
                            Kind.IMAGE_EMBEDDER)

    needed = seconds_to_frames(scene.duration_seconds, fps)
    plan = plan_clip_schedule(needed, model.config.clip_len, k)
    text = embed_text(scene.description, text_backend, net_cfg.text_dim)
    actor: Embedding | None = None
    if actor_frame is not None:
        actor = embed_image(actor_frame, image_backend, net_cfg.actor_dim)

    size = model.config.latent_size
    blank = torch.zeros(plan.clip_len, LATENT_CHANNELS, size, size, dtype=model.dtype)
    records: list[ClipRecord] = []
    prev: torch.Tensor | None = None
    for j in range(plan.clip_count):
        if prev is None:
            ctx, clip_actor = build_masked_context(blank, 0), actor
        else:
            seed = blank.clone()
            seed[: plan.k] = prev[-plan.k:]
            ctx, clip_actor = build_masked_context(seed, plan.k), None
        bundle = ConditioningBundle(text, clip_actor, sampler_cfg.beta, sampler_cfg.guidance_scale)
        lat = sample_clip(model.denoiser, model.schedule, bundle, ctx, sampler_cfg.steps, rng, sampler_cfg.kind)
        records.append(ClipRecord(j, ctx.k, clip_actor is not None, lat))
        prev = lat
    latents = stitch([r.latents for r in records], plan.k)
    frames = model.autoencoder.decode(latents[:needed]).numpy()
    log.debug("scene %d: %d clips, %d frames", scene.fragment_id, plan.clip_count, needed)
    return Snippet(frames, scene.fragment_id, records)


def frame_name(i: int) -> str:
    return f"frame_{i:05d}.png"


def to_uint8(frames: np.ndarray) -> np.ndarray:
    """``[F, 3, H, W]`` in [0, 1] to ``[F, H, W, 3]`` bytes."""
    return np.round(np.clip(frames, 0, 1) * 255).astype(np.uint8).transpose(0, 2, 3, 1)


def save_snippet(snippet: Snippet, out_dir: Path, fps: float = FPS, seed: int | None = None,
                 k: int | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(to_uint8(snippet.frames)):
        Image.fromarray(img).save(out_dir / frame_name(i))
    record = {"scene_id": snippet.scene_ref, "fps": fps, "frame_count": snippet.frame_count,
              "seed": seed, "k": k, "clip_count": len(snippet.clips)}
    (out_dir / SNIPPET_MANIFEST).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_snippet(out_dir: Path) -> tuple[Snippet, dict]:
    out_dir = Path(out_dir)
    record = json.loads((out_dir / SNIPPET_MANIFEST).read_text())
    imgs = [np.asarray(Image.open(out_dir / frame_name(i)).convert("RGB")) for i in range(record["frame_count"])]
    frames = np.stack(imgs).transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    return Snippet(frames, int(record["scene_id"])), record
