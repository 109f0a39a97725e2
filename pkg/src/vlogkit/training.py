"""Mixed generation/prediction training of the denoiser."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from .backends import BackendDescriptor, Embedding, Kind, build_backend, embed_image, embed_text
from .diffusion.model import VideoModel, load_checkpoint, save_checkpoint
from .diffusion.modes import ModeSelector, assemble_denoiser_input, build_masked_context, sample_k
from .diffusion.network import Denoiser, actor_parameters
from .diffusion.sampler import make_conditioning, torch_generator
from .diffusion.schedule import DiffusionSchedule, q_sample
from .errors import ConfigError, DomainError, NonFiniteError, VlogError
from .toydata import ToySample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1
    steps: int = 1000
    alpha: float = 0.6
    m: int = 6
    prompt_drop_prob: float = 0.1
    image_ratio: float = 0.0
    seed: int = 0
    weight_decay: float = 0.01
    beta: float = 1.0
    grad_clip: float = 1.0
    # all | no_actor (temporal/base stage) | actor_only (actor cross-attention stage)
    trainable: str = "all"
    # random_frame: a random frame of the clip is the actor reference; sample: the sample's actor_frame
    actor_source: str = "random_frame"
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if not 0 <= self.prompt_drop_prob <= 1:
            raise DomainError("prompt_drop_prob must lie in [0, 1]")
        if not 0 <= self.image_ratio <= 1:
            raise DomainError("image_ratio must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise DomainError("batch_size >= 1 and steps >= 0 required")
        if self.trainable not in ("all", "no_actor", "actor_only"):
            raise DomainError(f"unknown trainable set {self.trainable!r}")
        if self.actor_source not in ("random_frame", "sample"):
            raise DomainError(f"unknown actor_source {self.actor_source!r}")

    @property
    def selector(self) -> ModeSelector:
        return ModeSelector(self.alpha, self.m)

    @classmethod
    def from_yaml(cls, path: Path) -> "TrainConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        raw = raw.get("train", raw)
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass(eq=False)
class EncodedSample:
    latents: torch.Tensor  # [F, 4, h, w]
    text: Embedding
    frame_embs: list[Embedding]
    actor_emb: Embedding


class TrainingSet:
    """Toy samples with latents and embeddings computed once up front."""

    def __init__(self, samples: Sequence[ToySample], model: VideoModel, text_backend=None, image_backend=None):
        if not samples:
            raise DomainError("empty training set")
        dim = model.config.net
        self.text_backend = build_backend(text_backend or BackendDescriptor(Kind.TEXT_EMBEDDER, dim=dim.text_dim))
        self.image_backend = build_backend(image_backend or BackendDescriptor(Kind.IMAGE_EMBEDDER, dim=dim.actor_dim))
        self.items = [
            EncodedSample(
                latents=model.autoencoder.encode(s.frames),
                text=embed_text(s.caption, self.text_backend, dim.text_dim),
                frame_embs=[embed_image(f, self.image_backend, dim.actor_dim) for f in s.frames],
                actor_emb=embed_image(s.actor_frame, self.image_backend, dim.actor_dim),
            )
            for s in samples
        ]
        self.text_dim, self.actor_dim = dim.text_dim, dim.actor_dim

    def __len__(self) -> int:
        return len(self.items)


@dataclass(eq=False)
class Batch:
    latents: torch.Tensor  # [B, F, 4, h, w]
    texts: list[Embedding]
    actors: list[Embedding] | None
    is_image: bool

    @property
    def frames(self) -> int:
        return self.latents.shape[1]


def sample_batch(data: TrainingSet, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    is_image = bool(rng.random() < cfg.image_ratio)
    idx = rng.integers(len(data), size=cfg.batch_size)
    latents, texts, actors = [], [], []
    for i in idx:
        item = data.items[int(i)]
        n_frames = item.latents.shape[0]
        j = int(rng.integers(n_frames))
        texts.append(item.text)
        if is_image:
            # a still image is its own actor reference
            latents.append(item.latents[j : j + 1])
            actors.append(item.frame_embs[j])
        else:
            latents.append(item.latents)
            actors.append(item.frame_embs[j] if cfg.actor_source == "random_frame" else item.actor_emb)
    use_actor = cfg.trainable != "no_actor"
    return Batch(torch.stack(latents), texts, actors if use_actor else None, is_image)


@dataclass(eq=False)
class StepDraws:
    ks: np.ndarray
    ts: np.ndarray
    drop: np.ndarray
    noise: torch.Tensor


def draw_step(batch: Batch, selector: ModeSelector, schedule: DiffusionSchedule, cfg: TrainConfig,
              rng: np.random.Generator) -> StepDraws:
    b = batch.latents.shape[0]
    if batch.is_image:
        ks = np.zeros(b, dtype=np.int64)
    else:
        ks = np.minimum(sample_k(selector, rng, b), batch.frames)
    ts = rng.integers(schedule.T, size=b)
    drop = rng.random(b) < cfg.prompt_drop_prob
    noise = torch.randn(batch.latents.shape, generator=torch_generator(rng), dtype=torch.float64)
    return StepDraws(ks, ts, drop, noise)


def training_loss(net: Denoiser, batch: Batch, draws: StepDraws, schedule: DiffusionSchedule,
                  beta: float = 1.0) -> torch.Tensor:
    """MSE of the raw network output against its target, over every frame of every sample."""
    dtype = next(net.parameters()).dtype
    x0 = batch.latents.to(dtype)
    noise = draws.noise.to(dtype)
    ctx = build_masked_context(x0, torch.as_tensor(draws.ks))
    x_t = q_sample(x0, torch.as_tensor(draws.ts), noise, schedule)
    x_in = assemble_denoiser_input(x_t, ctx)
    texts = [Embedding.null(e.dim) if d else e for e, d in zip(batch.texts, draws.drop)]
    actors = None
    if batch.actors is not None:
        actors = [Embedding.null(e.dim) if d else e for e, d in zip(batch.actors, draws.drop)]
    cond = make_conditioning(texts, actors, beta, dtype)
    ts = torch.as_tensor(draws.ts)
    return torch.mean((net(x_in, ts, cond) - net.target(noise, x0, ts)) ** 2)


def trainable_parameters(net: Denoiser, which: str) -> list[torch.nn.Parameter]:
    actor = {id(p) for _, p in actor_parameters(net)}
    if which == "all":
        return list(net.parameters())
    if which == "no_actor":
        return [p for p in net.parameters() if id(p) not in actor]
    return [p for p in net.parameters() if id(p) in actor]


def make_optimizer(net: Denoiser, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        trainable_parameters(net, cfg.trainable), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )


def training_step(net: Denoiser, batch: Batch, selector: ModeSelector, schedule: DiffusionSchedule,
                  cfg: TrainConfig, rng: np.random.Generator, optimizer: torch.optim.Optimizer,
                  record: list[StepDraws] | None = None) -> float:
    draws = draw_step(batch, selector, schedule, cfg, rng)
    if record is not None:
        record.append(draws)
    optimizer.zero_grad(set_to_none=True)
    loss = training_loss(net, batch, draws, schedule, cfg.beta)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_([p for g in optimizer.param_groups for p in g["params"]], cfg.grad_clip)
    optimizer.step()
    return float(loss.detach())


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent stream per step, so a resumed run replays the same draws."""
    return np.random.default_rng([seed, step])


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.safetensors"


def train(cfg: TrainConfig, samples: Sequence[ToySample], model: VideoModel, out_dir: Path,
          resume: Path | None = None, text_backend=None, image_backend=None) -> Path:
    """Train ``model`` in place and return the final checkpoint path.

    With ``resume`` the parameters, optimizer moments and step counter come
    from that checkpoint and training continues to ``cfg.steps``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = 0
    optimizer = None
    if resume is not None:
        ck = load_checkpoint(resume)
        model = _adopt(model, ck.model)
        start = ck.step
        optimizer = make_optimizer(model.denoiser, cfg)
        if ck.optim_state is not None:
            optimizer.load_state_dict(ck.optim_state)
    else:
        model.autoencoder.fit(np.concatenate([s.frames for s in samples]))
    if optimizer is None:
        optimizer = make_optimizer(model.denoiser, cfg)
    for p in model.denoiser.parameters():
        p.requires_grad_(False)
    for p in trainable_parameters(model.denoiser, cfg.trainable):
        p.requires_grad_(True)

    data = TrainingSet(samples, model, text_backend, image_backend)
    extra = {"train_config": asdict(cfg)}
    metrics = out_dir / "metrics.csv"
    new_file = not metrics.exists()
    model.denoiser.train()
    t0 = time.perf_counter()
    with metrics.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["step", "loss", "k_histogram", "wall_time"])
        for step in range(start, cfg.steps):
            rng = step_rng(cfg.seed, step)
            batch = sample_batch(data, cfg, rng)
            drawn: list[StepDraws] = []
            try:
                loss = training_step(model.denoiser, batch, model.selector, model.schedule, cfg, rng, optimizer, drawn)
            except VlogError as exc:
                raise type(exc)(f"step {step}: {exc}") from exc
            hist = np.bincount(drawn[0].ks, minlength=model.selector.m + 1)
            writer.writerow([step + 1, f"{loss:.6g}", " ".join(map(str, hist)), f"{time.perf_counter() - t0:.3f}"])
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                log.info("step %d loss %.5f", step + 1, loss)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
                fh.flush()
                save_checkpoint(out_dir / checkpoint_name(step + 1), model, step + 1, optimizer, extra)
    model.denoiser.eval()
    final_step = max(cfg.steps, start)
    return save_checkpoint(out_dir / checkpoint_name(final_step), model, final_step, optimizer, extra)


def _adopt(model: VideoModel, loaded: VideoModel) -> VideoModel:
    model.config, model.autoencoder, model.denoiser = loaded.config, loaded.autoencoder, loaded.denoiser
    model.schedule, model.selector = loaded.schedule, loaded.selector
    return model
