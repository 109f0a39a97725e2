"""Model bundle and the checkpoint container.

A checkpoint is a safetensors file: named parameter arrays (``denoiser.*``,
``autoencoder.*``, ``schedule.*``, optional ``optim.*``) plus string metadata
holding the format version, geometry, schedule constants and mode selector.
The metadata travels as one sorted JSON string under ``META_KEY`` because the
safetensors writer does not keep metadata key order stable between calls.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import torch
from safetensors.torch import load_file, save_file

from ..errors import ConfigError
from .autoencoder import PatchAutoencoder
from .modes import ModeSelector
from .network import Denoiser, NetConfig
from .schedule import DiffusionSchedule, make_schedule

CHECKPOINT_FORMAT = "vlogkit-checkpoint"
CHECKPOINT_VERSION = 1
META_KEY = "vlogkit"


@dataclass
class ModelConfig:
    frame_size: int = 64
    factor: int = 8
    clip_len: int = 16
    identity_codec: bool = False
    T: int = 1000
    schedule: str = "scaled_linear"
    alpha: float = 0.6
    m: int = 6
    net: NetConfig = field(default_factory=NetConfig)

    @property
    def latent_size(self) -> int:
        return self.frame_size // self.factor

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        net = NetConfig(**d.pop("net", {}))
        return cls(net=net, **d)


class VideoModel:
    """Codec + denoiser + noise schedule + training-time mode selector."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=torch.float32):
        self.config = config = config or ModelConfig()
        if config.frame_size % config.factor:
            raise ConfigError(f"frame_size {config.frame_size} not divisible by factor {config.factor}")
        torch.manual_seed(seed)
        self.autoencoder = PatchAutoencoder(config.factor, identity=config.identity_codec).to(dtype)
        self.denoiser = Denoiser(config.net).to(dtype)
        self.schedule: DiffusionSchedule = make_schedule(config.T, config.schedule)
        self.selector = ModeSelector(config.alpha, config.m)
        self.denoiser.attach_schedule(self.schedule.alphas_cumprod)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.denoiser.parameters()).dtype

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()}
        out.update({f"autoencoder.{k}": v for k, v in self.autoencoder.state_dict().items()})
        out["schedule.betas"] = torch.from_numpy(self.schedule.betas)
        out["schedule.alphas_cumprod"] = torch.from_numpy(self.schedule.alphas_cumprod)
        return out


def _optim_tensors(optimizer: torch.optim.Optimizer | None) -> tuple[dict[str, torch.Tensor], str]:
    if optimizer is None:
        return {}, ""
    sd = optimizer.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for name, val in st.items():
            tensors[f"optim.{idx}.{name}"] = torch.as_tensor(val).clone()
    return tensors, json.dumps(sd["param_groups"], sort_keys=True)


def save_checkpoint(path: Path, model: VideoModel, step: int = 0,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_tensors().items()}
    opt_tensors, groups = _optim_tensors(optimizer)
    tensors.update(opt_tensors)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": str(CHECKPOINT_VERSION),
        "step": str(step),
        "model_config": json.dumps(model.config.to_dict(), sort_keys=True),
        "schedule": json.dumps(model.schedule.to_dict(), sort_keys=True),
        "selector": json.dumps(asdict(model.selector), sort_keys=True),
        "dtype": str(model.dtype).removeprefix("torch."),
        "optim_param_groups": groups,
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata={META_KEY: json.dumps(meta, sort_keys=True)})
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    model: VideoModel
    step: int
    optim_state: dict | None
    extra: dict
    metadata: dict[str, str]


def read_metadata(path: Path) -> dict[str, str]:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        raw = f.metadata() or {}
    try:
        return json.loads(raw[META_KEY]) if META_KEY in raw else dict(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: unreadable checkpoint metadata") from exc


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    meta = read_metadata(path)
    if meta.get("format") != CHECKPOINT_FORMAT or "version" not in meta:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if int(meta["version"]) > CHECKPOINT_VERSION:
        raise ConfigError(f"checkpoint version {meta['version']} is newer than supported {CHECKPOINT_VERSION}")
    tensors = load_file(str(path))
    dtype = getattr(torch, meta.get("dtype", "float32"))
    model = VideoModel(ModelConfig.from_dict(json.loads(meta["model_config"])), dtype=dtype)
    sel = json.loads(meta["selector"])
    model.selector = ModeSelector(**sel)
    model.denoiser.load_state_dict({k[9:]: v for k, v in tensors.items() if k.startswith("denoiser.")})
    model.autoencoder.load_state_dict({k[12:]: v for k, v in tensors.items() if k.startswith("autoencoder.")})
    model.schedule = DiffusionSchedule(
        model.schedule.T, model.schedule.kind,
        tensors["schedule.betas"].numpy().copy(), tensors["schedule.alphas_cumprod"].numpy().copy(),
    )
    model.denoiser.attach_schedule(model.schedule.alphas_cumprod)
    optim_state = None
    if meta.get("optim_param_groups"):
        state: dict[int, dict[str, torch.Tensor]] = {}
        for k, v in tensors.items():
            if k.startswith("optim."):
                _, idx, name = k.split(".", 2)
                state.setdefault(int(idx), {})[name] = v
        optim_state = {"state": state, "param_groups": json.loads(meta["optim_param_groups"])}
    return Checkpoint(model, int(meta.get("step", 0)), optim_state, json.loads(meta.get("extra", "{}")), meta)
