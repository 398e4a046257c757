"""Latent watermark pre-training: secret codec, fidelity losses, training loop.

The secret encoder maps a bit string to a cover-agnostic latent offset; the
decoder reads bits back out of the decoded image.  Training warm-starts on a
bits-only path (secret-encoder output fed straight into the image decoder)
and then switches to the full cover-image pipeline with distortions in the
loop and the combined objective: BCE + lambda * perceptual + mu * peak
regional variation.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import distortion as dist
from .config import ConfigError, Stage1Config
from .errors import TrainingError
from .nets import ConvAutoencoder, RandomFeatureNet, SecretDecoder, SecretEncoder, feature_distance
from .payload import PayloadError, bits_tensor, random_secret_batch


def encode_secret(secret, encoder: SecretEncoder) -> torch.Tensor:
    """Deterministic secret -> latent offset; shape (C, h, w)."""
    bits = bits_tensor(secret)
    if bits.numel() != encoder.payload_bits:
        raise PayloadError(f"expected {encoder.payload_bits} bits, got {bits.numel()}")
    with torch.no_grad():
        return encoder(bits[None])[0]


def embed_latent(z: torch.Tensor, pattern: torch.Tensor) -> torch.Tensor:
    """Additive embedding: the watermarked latent is z + offset."""
    if z.shape[-3:] != pattern.shape[-3:]:
        raise ValueError(f"latent shape {tuple(z.shape)} != pattern shape {tuple(pattern.shape)}")
    return z + pattern


def decode_secret(img: torch.Tensor, decoder: SecretDecoder, image_size: int = 32) -> torch.Tensor:
    """Bit probabilities from an image; off-size inputs are resized first."""
    single = img.dim() == 3
    if single:
        img = img[None]
    if img.shape[-1] != image_size or img.shape[-2] != image_size:
        img = F.interpolate(img, size=(image_size, image_size), mode="bilinear", align_corners=False)
    with torch.no_grad():
        probs = torch.sigmoid(decoder(img))
    return probs[0] if single else probs


def hard_bits(probs: torch.Tensor) -> np.ndarray:
    return (probs.detach().cpu().numpy() > 0.5).astype(np.int64)


def prvl_loss(img_o: torch.Tensor, img_w: torch.Tensor, window: int) -> torch.Tensor:
    """Peak regional variation: max window-averaged channel-mean abs difference.

    The averaging kernel is uniform (entries 1/window^2) and slides fully
    inside the image.  Batched inputs return the mean of per-sample peaks.
    """
    if img_o.shape != img_w.shape:
        raise ValueError("image shapes must match")
    single = img_o.dim() == 3
    if single:
        img_o, img_w = img_o[None], img_w[None]
    h, w = img_o.shape[-2:]
    if window > min(h, w) or window < 1:
        raise ConfigError(f"window {window} does not fit a {h}x{w} image")
    variation = (img_o - img_w).abs().mean(dim=1, keepdim=True)
    kernel = torch.full((1, 1, window, window), 1.0 / (window * window))
    pooled = F.conv2d(variation, kernel)
    return pooled.amax(dim=(1, 2, 3)).mean()


_feature_net: RandomFeatureNet | None = None


def perceptual_net() -> RandomFeatureNet:
    """Shared frozen random-feature extractor used as the perceptual proxy."""
    global _feature_net
    if _feature_net is None:
        _feature_net = RandomFeatureNet()
    return _feature_net


def perceptual_loss(img_a: torch.Tensor, img_b: torch.Tensor) -> torch.Tensor:
    """Symmetric feature-space distance between two images (batched or not)."""
    if img_a.dim() == 3:
        img_a, img_b = img_a[None], img_b[None]
    return feature_distance(perceptual_net(), img_a, img_b)


def corner_patch_augment(pattern: torch.Tensor, z: torch.Tensor, scale: float) -> torch.Tensor:
    """Embed the pattern's four quadrants at the corners of an upscaled latent.

    Simulates how a fixed-size watermark lands on larger sampled latents: the
    cover latent is resized by ``scale``, quadrant patches of the offset are
    added at the four corners, and the result is resized back.
    """
    if not 1.0 <= scale <= 1.5:
        raise ConfigError(f"scale must be in [1, 1.5], got {scale}")
    single = z.dim() == 3
    if single:
        z = z[None]
    if pattern.dim() == 3:
        pattern = pattern[None].expand(len(z), -1, -1, -1)
    c, h, w = pattern.shape[-3:]
    if h % 2 or w % 2:
        raise ConfigError("latent dimensions must be even for corner patches")
    ph, pw = h // 2, w // 2
    nh, nw = round(z.shape[-2] * scale), round(z.shape[-1] * scale)
    big = F.interpolate(z, size=(nh, nw), mode="bilinear", align_corners=False)
    out = big.clone()
    out[..., :ph, :pw] += pattern[..., :ph, :pw]
    out[..., :ph, -pw:] += pattern[..., :ph, -pw:]
    out[..., -ph:, :pw] += pattern[..., -ph:, :pw]
    out[..., -ph:, -pw:] += pattern[..., -ph:, -pw:]
    back = F.interpolate(out, size=z.shape[-2:], mode="bilinear", align_corners=False)
    return back[0] if single else back


def stage1_total_loss(
    encoder: SecretEncoder,
    decoder: SecretDecoder,
    vae: ConvAutoencoder,
    images: torch.Tensor,
    bits: torch.Tensor,
    cfg: Stage1Config,
    spec: dist.DistortionSpec | None,
    rng: torch.Generator,
    corner_scale: float | None = None,
) -> tuple[torch.Tensor, dict]:
    """Full stage-1 objective on one batch; deterministic given the generator."""
    with torch.no_grad():
        z_o = vae.encode(images)
        img_r = vae.decode(z_o)
    delta = encoder(bits)
    if corner_scale is None:
        z_w = embed_latent(z_o, delta)
    else:
        z_w = corner_patch_augment(delta, z_o, corner_scale)
    img_w = vae.decode(z_w)

    decoded_input = img_w if spec is None else dist.apply(spec, img_w, rng)
    logits = decoder(decoded_input)
    bce = F.binary_cross_entropy_with_logits(logits, bits)
    perc = perceptual_loss(img_w, img_r)
    prvl = prvl_loss(images, img_w, cfg.prvl_window)
    total = bce + cfg.lambda_perceptual * perc + cfg.mu_prvl * prvl
    with torch.no_grad():
        acc = ((logits > 0).float() == bits).float().mean().item()
    parts = {"bce": bce.item(), "perceptual": perc.item(), "prvl": prvl.item(), "acc": acc}
    return total, parts


def stage1_train(
    images: torch.Tensor,
    vae: ConvAutoencoder,
    cfg: Stage1Config,
    seed: int = 0,
    metrics_path: str | Path | None = None,
    loss_overrides: dict | None = None,
) -> tuple[SecretEncoder, SecretDecoder, dict]:
    """Train the secret codec against a frozen autoencoder.

    Phase A optimizes BCE only, feeding the secret-encoder output directly to
    the image decoder with no cover image, until the trailing-window mean BCE
    drops below the warm-start threshold.  Phase B runs the full pipeline with
    a random distortion applied to the watermarked image before decoding.

    ``loss_overrides`` lets ablations swap the regional-variation term
    ("prvl" -> "none" | "mse" | "prvl") without touching the config.
    """
    if len(images) < 1:
        raise ConfigError("stage-1 training requires a non-empty dataset")
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed + 10)
    dist_rng = torch.Generator().manual_seed(seed + 77)  # distortion stream, isolated
    nprng = np.random.default_rng(seed + 20)
    overrides = loss_overrides or {}
    variation_mode = overrides.get("prvl", "prvl")

    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)

    latent_size = vae.encode(images[:1]).shape[-1]
    encoder = SecretEncoder(payload_bits=cfg.payload_bits, latent_size=latent_size)
    decoder = SecretDecoder(payload_bits=cfg.payload_bits)
    opt = torch.optim.AdamW(
        list(encoder.parameters()) + list(decoder.parameters()),
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    menu = dist.menu_by_name(cfg.distortion_menu)
    metrics_fh = open(metrics_path, "a") if metrics_path else None
    history = {"warmstart_iters": 0, "bce": [], "perceptual": [], "prvl": [], "acc": []}

    # Phase A: bits-only warm start.
    recent = []
    for it in range(cfg.warmstart_max_iters):
        bits = torch.from_numpy(random_secret_batch(cfg.batch_size, cfg.payload_bits, nprng)).float()
        img = vae.decode(encoder(bits))
        logits = decoder(img)
        bce = F.binary_cross_entropy_with_logits(logits, bits)
        if not torch.isfinite(bce):
            raise TrainingError("warm-start BCE diverged")
        opt.zero_grad()
        bce.backward()
        opt.step()
        recent.append(bce.item())
        if len(recent) >= cfg.warmstart_window:
            if float(np.mean(recent[-cfg.warmstart_window :])) < cfg.warmstart_threshold:
                history["warmstart_iters"] = it + 1
                break
    else:
        raise TrainingError(
            f"warm start failed to reach BCE {cfg.warmstart_threshold} "
            f"within {cfg.warmstart_max_iters} iterations"
        )

    # Phase B: full pipeline with cover images and distortion in the loop.
    last_good = None
    for it in range(cfg.iters):
        idx = torch.randint(0, len(images), (cfg.batch_size,), generator=g)
        batch = images[idx]
        bits = torch.from_numpy(random_secret_batch(cfg.batch_size, cfg.payload_bits, nprng)).float()

        spec = None
        if torch.rand((), generator=dist_rng).item() < cfg.distortion_prob:
            spec = menu[int(torch.randint(0, len(menu), (), generator=dist_rng))]
        corner_scale = None
        if torch.rand((), generator=g).item() < cfg.corner_augment_prob:
            corner_scale = 1.0 + (cfg.corner_scale_max - 1.0) * torch.rand((), generator=g).item()

        if variation_mode == "prvl":
            total, parts = stage1_total_loss(
                encoder, decoder, vae, batch, bits, cfg, spec, dist_rng, corner_scale
            )
        else:
            total, parts = _stage1_loss_variant(
                encoder, decoder, vae, batch, bits, cfg, spec, dist_rng, corner_scale, variation_mode
            )
        if not torch.isfinite(total):
            raise TrainingError("stage-1 loss diverged", last_good=last_good)
        opt.zero_grad()
        total.backward()
        opt.step()

        for key in ("bce", "perceptual", "prvl", "acc"):
            history[key].append(parts[key])
        if metrics_fh:
            record = {"iteration": it, **parts}
            metrics_fh.write(json.dumps(record) + "\n")
        if (it + 1) % 200 == 0:
            last_good = (copy.deepcopy(encoder.state_dict()), copy.deepcopy(decoder.state_dict()))

    if metrics_fh:
        metrics_fh.close()
    encoder.eval()
    decoder.eval()
    return encoder, decoder, history


def _stage1_loss_variant(
    encoder, decoder, vae, images, bits, cfg, spec, rng, corner_scale, variation_mode
):
    """Stage-1 objective with the regional-variation term swapped or removed."""
    with torch.no_grad():
        z_o = vae.encode(images)
        img_r = vae.decode(z_o)
    delta = encoder(bits)
    z_w = embed_latent(z_o, delta) if corner_scale is None else corner_patch_augment(delta, z_o, corner_scale)
    img_w = vae.decode(z_w)
    decoded_input = img_w if spec is None else dist.apply(spec, img_w, rng)
    logits = decoder(decoded_input)
    bce = F.binary_cross_entropy_with_logits(logits, bits)
    perc = perceptual_loss(img_w, img_r)
    if variation_mode == "mse":
        variation = F.mse_loss(img_w, images)
    elif variation_mode == "none":
        variation = img_w.new_zeros(())
    else:
        raise ConfigError(f"unknown variation mode {variation_mode!r}")
    total = bce + cfg.lambda_perceptual * perc + cfg.mu_prvl * variation
    with torch.no_grad():
        acc = ((logits > 0).float() == bits).float().mean().item()
        peak = prvl_loss(images, img_w, cfg.prvl_window).item()
    parts = {"bce": bce.item(), "perceptual": perc.item(), "prvl": peak, "acc": acc}
    return total, parts
