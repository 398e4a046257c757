"""Toy-scale white-box watermarking for latent diffusion models.

Pipeline: train a tiny latent diffusion model, pre-train a latent secret
codec, fold the watermark into the denoiser via a secret-conditioned
low-rank adapter with prior-preserving fine-tuning, then verify payloads
with exact binomial detection statistics.
"""

__version__ = "0.1.0"
