"""Procedural moving-shape clips with template captions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "white": (0.95, 0.95, 0.95),
    "purple": (0.6, 0.2, 0.8),
}
SHAPES = ("square", "circle", "triangle")
DIRECTIONS = ("left", "right", "up", "down")
MOTIONS = ("translate", "bounce")


@dataclass
class ToySpec:
    n_samples: int = 8
    frames: int = 16
    size: int = 64
    shape_frac: float = 0.3
    # per-sample background tint is drawn uniformly from [0, max_background] per channel
    max_background: float = 0.5
    colors: tuple[str, ...] = tuple(PALETTE)
    shapes: tuple[str, ...] = SHAPES
    motions: tuple[str, ...] = MOTIONS
    # explicit (color, shape, motion) triples; motion is a direction or "bounce"
    samples: list[tuple[str, str, str]] = field(default_factory=list)


@dataclass(eq=False)
class ToySample:
    frames: np.ndarray
    caption: str
    actor_frame: np.ndarray
    params: dict


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "triangle":
        rel = (yy - (cy - r)) / (2 * r)
        return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * r)
    raise ValueError(f"unknown shape {shape!r}")


def caption_for(color: str, shape: str, motion: str) -> str:
    verb = "bounces" if motion == "bounce" else f"moves {motion}"
    return f"a {color} {shape} {verb}"


def render_clip(color: str, shape: str, motion: str, frames: int = 16, size: int = 64,
                shape_frac: float = 0.3, phase: float = 0.0, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """``[F, 3, size, size]`` clip of one shape on a flat background."""
    rgb = np.asarray(PALETTE[color], dtype=np.float32)
    r = shape_frac * size / 2
    lo, hi = r + 1, size - r - 1
    out = np.empty((frames, 3, size, size), dtype=np.float32)
    out[:] = np.asarray(background, dtype=np.float32)[:, None, None]
    for i in range(frames):
        s = i / max(frames - 1, 1)
        cy = cx = size / 2
        if motion == "bounce":
            cy = hi - (hi - lo) * abs(np.sin(np.pi * (s + phase)))
        else:
            pos = lo + (hi - lo) * s
            if motion == "right":
                cx = pos
            elif motion == "left":
                cx = hi + lo - pos
            elif motion == "down":
                cy = pos
            elif motion == "up":
                cy = hi + lo - pos
            else:
                raise ValueError(f"unknown motion {motion!r}")
        # snap to whole pixels so flat regions stay flat under patch coding
        mask = _shape_mask(shape, size, round(cy), round(cx), r)
        out[i][:, mask] = rgb[:, None]
    return out


def render_actor(color: str, shape: str, size: int = 64, shape_frac: float = 0.3) -> np.ndarray:
    rgb = np.asarray(PALETTE[color], dtype=np.float32)
    img = np.zeros((3, size, size), dtype=np.float32)
    img[:, _shape_mask(shape, size, size / 2, size / 2, shape_frac * size / 2)] = rgb[:, None]
    return img


def make_toy_dataset(spec: ToySpec | None = None, seed: int = 0) -> list[ToySample]:
    spec = spec or ToySpec()
    rng = np.random.default_rng(seed)
    triples = list(spec.samples)
    while len(triples) < spec.n_samples:
        motion = str(rng.choice(spec.motions))
        if motion == "translate":
            motion = str(rng.choice(DIRECTIONS))
        triples.append((str(rng.choice(spec.colors)), str(rng.choice(spec.shapes)), motion))
    out = []
    for color, shape, motion in triples[: max(spec.n_samples, len(spec.samples))]:
        phase = float(rng.uniform(0, 1)) if motion == "bounce" else 0.0
        bg = tuple(float(c) for c in rng.uniform(0, spec.max_background, size=3))
        frames = render_clip(color, shape, motion, spec.frames, spec.size, spec.shape_frac, phase, bg)
        out.append(ToySample(
            frames=frames,
            caption=caption_for(color, shape, motion),
            actor_frame=render_actor(color, shape, spec.size, spec.shape_frac),
            params={"color": color, "shape": shape, "motion": motion, "phase": phase, "background": bg},
        ))
    return out
