"""Turn a short story into a multi-scene narrated video.

Planning is delegated to a director LLM; shooting uses a small masked latent
video diffusion model that can both generate a clip from text and continue a
clip from its last frames.
"""

__version__ = "0.1.0"
