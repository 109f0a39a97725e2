"""Masked latent video diffusion at desk scale."""
from .autoencoder import PatchAutoencoder
from .model import Checkpoint, ModelConfig, VideoModel, load_checkpoint, save_checkpoint
from .modes import (
    MaskedContext,
    ModeSelector,
    assemble_denoiser_input,
    build_masked_context,
    pmf,
    sample_k,
    split_denoiser_input,
)
from .network import Conditioning, Denoiser, NetConfig, SpatioTemporalBlock, predict_noise
from .sampler import ConditioningBundle, SamplerConfig, cfg_combine, make_conditioning, sample_clip
from .schedule import DiffusionSchedule, make_schedule, q_sample, sampling_timesteps
