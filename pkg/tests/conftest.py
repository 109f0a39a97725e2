from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

from vlogkit.diffusion import ModelConfig, NetConfig, VideoModel
from vlogkit.toydata import ToySample, ToySpec, make_toy_dataset
from vlogkit.training import TrainConfig, train

TEDDY_STORY = (Path(__file__).parent / "data" / "teddy_story.txt").read_text(encoding="utf-8").strip()

# Overfit recipe used by the acceptance criteria: one 16-frame toy clip at 16x16,
# latent 8x8x4, v-prediction, batch 2, 2000 AdamW steps.
OVERFIT_MODEL = ModelConfig(frame_size=16, factor=2, clip_len=16, net=NetConfig(width=32))
OVERFIT_TRAIN = TrainConfig(steps=2000, learning_rate=1e-3, batch_size=2, log_every=0)


def tiny_model(frame_size: int = 8, factor: int = 2, clip_len: int = 4, width: int = 8, seed: int = 0,
               dtype=torch.float32, identity: bool = False, **net) -> VideoModel:
    cfg = ModelConfig(frame_size=frame_size, factor=factor, clip_len=clip_len, identity_codec=identity,
                      net=NetConfig(width=width, text_dim=16, actor_dim=16, **net))
    return VideoModel(cfg, seed=seed, dtype=dtype)


@dataclass
class Overfit:
    checkpoint: Path
    sample: ToySample
    model: VideoModel
    seconds: float


@pytest.fixture(scope="session")
def overfit(tmp_path_factory) -> Overfit:
    import time

    out = tmp_path_factory.mktemp("overfit")
    samples = make_toy_dataset(ToySpec(n_samples=1, size=16, frames=16), seed=0)
    model = VideoModel(OVERFIT_MODEL, seed=0)
    t0 = time.perf_counter()
    ckpt = train(OVERFIT_TRAIN, samples, model, out)
    return Overfit(ckpt, samples[0], model, time.perf_counter() - t0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
