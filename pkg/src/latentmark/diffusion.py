"""Training and sampling for the miniature class-conditional latent diffusion model."""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn.functional as F

from .config import BaseDiffusionConfig, ConfigError, VAEConfig
from .errors import TrainingError
from .nets import ConvAutoencoder, CondUNet
from .schedule import DiffusionSchedule, forward_diffuse


def _batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_autoencoder(
    images: torch.Tensor,
    cfg: VAEConfig,
    seed: int = 0,
    holdout: int = 256,
) -> tuple[ConvAutoencoder, dict]:
    """Train the image autoencoder and calibrate its latent scale.

    Returns the model plus a history dict with per-epoch train loss and the
    final held-out per-pixel MSE, which must fall below the configured bound.
    """
    if len(images) < 1:
        raise ConfigError("autoencoder training requires a non-empty dataset")
    if len(images) <= holdout:
        holdout = max(1, len(images) // 8)
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    train, held = images[:-holdout], images[-holdout:]

    vae = ConvAutoencoder(image_channels=images.shape[1])
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.lr)
    history = {"epoch_loss": []}
    last_good = None
    for _ in range(cfg.epochs):
        losses = []
        for idx in _batches(len(train), cfg.batch_size, g):
            batch = train[idx]
            recon = vae(batch)
            loss = F.mse_loss(recon, batch)
            if not torch.isfinite(loss):
                raise TrainingError("autoencoder loss diverged (NaN)", last_good=last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history["epoch_loss"].append(float(np.mean(losses)))
        last_good = copy.deepcopy(vae.state_dict())

    # Calibrate the latent scale so diffusion sees roughly unit-variance latents.
    with torch.no_grad():
        probe = train[: min(len(train), 2048)]
        std = vae.encoder(probe).std().clamp_min(1e-6)
        vae.latent_scale.fill_(1.0 / std)
        held_mse = F.mse_loss(vae(held), held).item()
    history["holdout_mse"] = held_mse
    if held_mse > cfg.recon_threshold:
        raise TrainingError(
            f"held-out reconstruction MSE {held_mse:.4f} above bound {cfg.recon_threshold}",
            last_good=last_good,
        )
    vae.eval()
    return vae, history


@torch.no_grad()
def encode_dataset(vae: ConvAutoencoder, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Encode a full image set to latents in batches."""
    outs = [vae.encode(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(outs)


def diffusion_loss(
    unet: CondUNet,
    z0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    c: torch.Tensor,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Noise-prediction objective: mean squared error against the true noise."""
    z_t = forward_diffuse(z0, t, eps, sched)
    return F.mse_loss(unet(z_t, t, c), eps)


def train_base_diffusion(
    images: torch.Tensor,
    labels: torch.Tensor,
    vae: ConvAutoencoder,
    sched: DiffusionSchedule,
    cfg: BaseDiffusionConfig,
    seed: int = 0,
) -> tuple[CondUNet, dict]:
    """Train the frozen base noise predictor on autoencoded latents.

    With probability ``p_uncond`` the class condition is replaced by the NULL
    token so the model supports classifier-free guidance at sampling time.
    """
    if len(images) < 1:
        raise ConfigError("diffusion training requires a non-empty dataset")
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed + 1)
    latents = encode_dataset(vae, images)
    num_classes = int(labels.max().item()) + 1

    unet = CondUNet(
        latent_channels=latents.shape[1],
        base_channels=cfg.base_channels,
        emb_dim=cfg.emb_dim,
        num_classes=num_classes,
    )
    opt = torch.optim.Adam(unet.parameters(), lr=cfg.lr)
    history = {"epoch_loss": []}
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(latents), cfg.batch_size, g):
            z0, c = latents[idx], labels[idx].clone()
            drop = torch.rand(len(idx), generator=g) < cfg.p_uncond
            c[drop] = unet.null_class
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=g)
            eps = torch.randn(z0.shape, generator=g)
            loss = diffusion_loss(unet, z0, t, eps, c, sched)
            if not torch.isfinite(loss):
                raise TrainingError(f"diffusion loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history["epoch_loss"].append(float(np.mean(losses)))

    trailing = float(np.mean(history["epoch_loss"][-3:]))
    history["trailing_loss"] = trailing
    if trailing > cfg.loss_bound:
        raise TrainingError(f"final loss {trailing:.3f} above bound {cfg.loss_bound}")
    unet.eval()
    for p in unet.parameters():
        p.requires_grad_(False)
    return unet, history


def condition_batch(class_id: int | None, n: int, num_classes: int) -> torch.Tensor:
    """Build a class-id batch; ``None`` selects the NULL (unconditional) token."""
    idx = num_classes if class_id is None else int(class_id)
    if not 0 <= idx <= num_classes:
        raise ConfigError(f"class id {class_id} outside [0, {num_classes})")
    return torch.full((n,), idx, dtype=torch.long)


def cfg_noise_prediction(
    unet,
    z_t: torch.Tensor,
    t: torch.Tensor,
    c: torch.Tensor,
    guidance_scale: float,
) -> torch.Tensor:
    """Classifier-free-guided prediction: eps_u + scale * (eps_c - eps_u)."""
    null = torch.full_like(c, unet.null_class)
    both = unet(torch.cat([z_t, z_t]), torch.cat([t, t]), torch.cat([c, null]))
    eps_c, eps_u = both.chunk(2)
    return eps_u + guidance_scale * (eps_c - eps_u)


def _timestep_path(t_start: int, steps: int) -> list[int]:
    """Descending subsequence of timesteps from t_start, ending at 0."""
    ts = np.unique(np.round(np.linspace(t_start, 1, min(steps, t_start))).astype(int))[::-1]
    return [int(t) for t in ts] + [0]


def sample_latents(
    unet,
    sched: DiffusionSchedule,
    n: int,
    class_id: int | None | torch.Tensor = None,
    sampler: str = "ddim",
    steps: int = 25,
    guidance_scale: float = 7.5,
    seed: int | torch.Generator = 0,
    latent_shape: tuple[int, int, int] | None = None,
    init: torch.Tensor | None = None,
    t_start: int | None = None,
) -> torch.Tensor:
    """Reverse-diffuse latents with DDIM (deterministic) or ancestral sampling.

    All stochastic draws come from ``seed``; identical arguments reproduce
    bit-identical latents.  ``init``/``t_start`` start the reverse pass from a
    partially noised latent instead of pure noise (used by the regeneration
    distortion).
    """
    if sampler not in ("ddim", "ancestral"):
        raise ConfigError(f"unknown sampler {sampler!r}")
    if steps < 1 or steps > sched.T:
        raise ConfigError(f"steps must be in [1, {sched.T}], got {steps}")
    g = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))

    if isinstance(class_id, torch.Tensor):
        c = class_id.long()
        if len(c) != n:
            raise ConfigError("class tensor length must equal n")
    else:
        c = condition_batch(class_id, n, unet.num_classes)

    if init is None:
        if latent_shape is None:
            lc = unet.hparams["latent_channels"]
            latent_shape = (lc, 8, 8)
        t_start = sched.T
        z = torch.randn((n, *latent_shape), generator=g)
    else:
        if t_start is None:
            raise ConfigError("t_start is required when init is given")
        z = init.clone()

    path = _timestep_path(t_start, steps)
    with torch.no_grad():
        for t_cur, t_prev in zip(path[:-1], path[1:]):
            t_batch = torch.full((len(z),), t_cur, dtype=torch.long)
            eps_hat = cfg_noise_prediction(unet, z, t_batch, c, guidance_scale)
            abar_t = sched.alpha_bar(t_cur).to(z.dtype)
            abar_prev = sched.alpha_bar(t_prev).to(z.dtype)
            x0_hat = (z - torch.sqrt(1.0 - abar_t) * eps_hat) / torch.sqrt(abar_t)
            if sampler == "ddim":
                z = torch.sqrt(abar_prev) * x0_hat + torch.sqrt(1.0 - abar_prev) * eps_hat
            else:
                alpha_eff = abar_t / abar_prev
                coef_x0 = torch.sqrt(abar_prev) * (1.0 - alpha_eff) / (1.0 - abar_t)
                coef_zt = torch.sqrt(alpha_eff) * (1.0 - abar_prev) / (1.0 - abar_t)
                z = coef_x0 * x0_hat + coef_zt * z
                if t_prev > 0:
                    var = (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - alpha_eff)
                    z = z + math.sqrt(max(var.item(), 0.0)) * torch.randn(z.shape, generator=g)
    return z


@torch.no_grad()
def sample_images(
    unet,
    vae: ConvAutoencoder,
    sched: DiffusionSchedule,
    n: int,
    class_id: int | None | torch.Tensor = None,
    sampler: str = "ddim",
    steps: int = 25,
    guidance_scale: float = 7.5,
    seed: int | torch.Generator = 0,
) -> torch.Tensor:
    """Sample latents and decode them to images in [0, 1]."""
    z = sample_latents(
        unet, sched, n, class_id=class_id, sampler=sampler, steps=steps,
        guidance_scale=guidance_scale, seed=seed,
    )
    return vae.decode(z).clamp(0.0, 1.0)
