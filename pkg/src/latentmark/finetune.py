"""Fine-tuning stages that teach the base model to emit the latent watermark.

The prior-preserving objective matches the adapted model's noise prediction
on watermark-shifted noisy latents to the frozen base model's prediction on
the corresponding clean latents, so only the offset is learned and the model
distribution otherwise stays put.  The naive baseline instead regresses the
true noise on shifted latents, which drags the model toward the fine-tuning
dataset.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call

from .config import ConfigError, DecoderFinetuneConfig, PPFTConfig
from .diffusion import encode_dataset, sample_latents
from .errors import TrainingError
from .lora import SecretConditionedUNet, WatermarkLoRA, select_target_shapes
from .nets import ConvAutoencoder, CondUNet, SecretDecoder, SecretEncoder
from .payload import random_secret
from .schedule import DiffusionSchedule, forward_diffuse


def prior_preserving_loss(
    theta_forward,
    frozen_model: CondUNet,
    z0: torch.Tensor,
    delta_zw: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    c: torch.Tensor,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Squared distance between adapted and frozen predictions (batch mean).

    ``theta_forward`` is the adapted model's forward; the frozen model never
    receives gradients.  Per-sample squared L2 norms are averaged over the
    batch, so a single-sample batch returns exactly the squared norm.
    """
    z_t = forward_diffuse(z0, t, eps, sched)
    z_ub = forward_diffuse(z0 + delta_zw, t, eps, sched)
    pred = theta_forward(z_ub, t, c)
    with torch.no_grad():
        target = frozen_model(z_t, t, c)
    return (pred - target).flatten(1).square().sum(dim=1).mean()


def naive_diffusion_loss(
    theta_forward,
    z0: torch.Tensor,
    delta_zw: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    c: torch.Tensor,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Plain noise-prediction objective applied to watermark-shifted latents."""
    z_ub = forward_diffuse(z0 + delta_zw, t, eps, sched)
    pred = theta_forward(z_ub, t, c)
    return (pred - eps).flatten(1).square().sum(dim=1).mean()


def generate_training_set(
    unet: CondUNet,
    vae: ConvAutoencoder,
    sched: DiffusionSchedule,
    n: int,
    cfg: PPFTConfig,
    seed: int = 0,
    batch_size: int = 256,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample (image, condition) pairs from the base model itself."""
    g = torch.Generator().manual_seed(seed)
    images, labels = [], []
    remaining = n
    while remaining > 0:
        b = min(batch_size, remaining)
        c = torch.randint(0, unet.num_classes, (b,), generator=g)
        z = sample_latents(
            unet, sched, b, class_id=c, sampler="ddim",
            steps=cfg.sample_steps, guidance_scale=cfg.guidance_scale, seed=g,
        )
        with torch.no_grad():
            images.append(vae.decode(z).clamp(0.0, 1.0))
        labels.append(c)
        remaining -= b
    return torch.cat(images), torch.cat(labels)


def train_watermark_lora(
    unet: CondUNet,
    vae: ConvAutoencoder,
    encoder: SecretEncoder,
    images: torch.Tensor,
    labels: torch.Tensor,
    sched: DiffusionSchedule,
    cfg: PPFTConfig,
    seed: int = 0,
) -> tuple[WatermarkLoRA, dict]:
    """Train the secret-conditioned adapter (Algorithm: one secret per step).

    Gradients flow into the A/B factors and mapper embeddings only; the base
    model, autoencoder, and secret encoder stay frozen.
    """
    if cfg.objective not in ("prior_preserving", "naive"):
        raise ConfigError(f"unknown objective {cfg.objective!r}")
    if cfg.mapper_init == "orthogonal" and cfg.rank < encoder.payload_bits:
        raise ConfigError("orthogonal init requires rank >= payload bits")
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed + 3)
    nprng = np.random.default_rng(seed + 4)

    for module in (unet, vae, encoder):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)

    targets = select_target_shapes(unet, cfg.target_patterns)
    lora = WatermarkLoRA(
        targets,
        payload_bits=encoder.payload_bits,
        rank=cfg.rank,
        init_mode=cfg.mapper_init,
        alpha_default=cfg.merge_alpha,
        seed=seed,
    )
    opt = torch.optim.AdamW(lora.parameters(), lr=cfg.lr)
    latents = encode_dataset(vae, images)
    history = {"epoch_loss": []}

    for epoch in range(cfg.epochs):
        order = torch.randperm(len(latents), generator=g)
        losses = []
        for i in range(0, len(latents), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            z0, c = latents[idx], labels[idx].clone()
            drop = torch.rand(len(idx), generator=g) < cfg.p_uncond
            c[drop] = unet.null_class

            secret = random_secret(encoder.payload_bits, nprng)
            with torch.no_grad():
                delta_zw = encoder(torch.from_numpy(secret).float()[None])[0]
            overrides = lora.conditioned_params(unet, secret, alpha=cfg.train_alpha)
            theta_forward = lambda z, t, cc: functional_call(unet, overrides, (z, t, cc))

            t = torch.randint(1, sched.T + 1, (len(idx),), generator=g)
            eps = torch.randn(z0.shape, generator=g)
            if cfg.objective == "prior_preserving":
                loss = prior_preserving_loss(theta_forward, unet, z0, delta_zw, t, eps, c, sched)
            else:
                loss = naive_diffusion_loss(theta_forward, z0, delta_zw, t, eps, c, sched)
            if not torch.isfinite(loss):
                raise TrainingError(f"adapter loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history["epoch_loss"].append(float(np.mean(losses)))

    lora.eval()
    return lora, history


def decoder_finetune(
    decoder: SecretDecoder,
    unet: CondUNet,
    vae: ConvAutoencoder,
    encoder: SecretEncoder,
    lora: WatermarkLoRA,
    sched: DiffusionSchedule,
    cfg: DecoderFinetuneConfig,
    seed: int = 0,
    image_size: int = 32,
) -> tuple[SecretDecoder, dict]:
    """Fine-tune only the extractor on freshly sampled watermarked images.

    Images are sampled at the configured sizes from the adapter-conditioned
    model with fresh random secrets; everything except the decoder is frozen
    and bit-identical afterwards.
    """
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed + 5)
    nprng = np.random.default_rng(seed + 6)
    for module in (unet, vae, encoder, lora):
        for p in module.parameters():
            p.requires_grad_(False)
    decoder = copy.deepcopy(decoder)
    for p in decoder.parameters():
        p.requires_grad_(True)
    decoder.train()
    opt = torch.optim.AdamW(decoder.parameters(), lr=cfg.lr)

    latent_factor = image_size // vae.encode(torch.zeros(1, 3, image_size, image_size)).shape[-1]
    history = {"loss": []}
    for it in range(cfg.iters):
        secret = random_secret(encoder.payload_bits, nprng)
        size = int(cfg.sizes[int(torch.randint(0, len(cfg.sizes), (), generator=g))])
        if size % latent_factor:
            raise ConfigError(f"size {size} incompatible with latent factor {latent_factor}")
        marked = SecretConditionedUNet(unet, lora, secret, alpha=lora.alpha_default)
        c = torch.randint(0, unet.num_classes, (cfg.batch_size,), generator=g)
        z = sample_latents(
            marked, sched, cfg.batch_size, class_id=c, sampler="ddim",
            steps=cfg.sample_steps, guidance_scale=cfg.guidance_scale, seed=g,
            latent_shape=(vae.hparams["latent_channels"], size // latent_factor, size // latent_factor),
        )
        with torch.no_grad():
            imgs = vae.decode(z).clamp(0.0, 1.0)
        if size != image_size:
            imgs = F.interpolate(imgs, size=(image_size, image_size), mode="bilinear", align_corners=False)
        bits = torch.from_numpy(secret).float()[None].expand(cfg.batch_size, -1)
        loss = F.binary_cross_entropy_with_logits(decoder(imgs), bits)
        if not torch.isfinite(loss):
            raise TrainingError("decoder fine-tune diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["loss"].append(loss.item())

    decoder.eval()
    return decoder, history
