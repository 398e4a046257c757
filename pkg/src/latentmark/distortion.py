"""Image distortions: differentiable train-time layers and the eval suite.

Train-time distortions must keep a gradient path to the input image so the
secret codec can learn robustness end to end.  Eval-time distortions may use
real codecs (PIL JPEG) and the diffusion-regeneration attack.  All stochastic
choices are drawn from an explicit ``torch.Generator`` so runs reproduce.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import ConfigError
from .schedule import DiffusionSchedule, forward_diffuse


@dataclass(frozen=True)
class DistortionSpec:
    kind: str  # jpeg_approx | crop_resize | gaussian_blur | gaussian_noise | color_jitter | denoise_regen | identity
    params: Mapping = field(default_factory=dict)
    differentiable: bool = True


# Train-time menu: parameter ranges from the robustness-training recipe,
# with pixel-scale quantities normalized to [0, 1] images (noise variance 10
# on the 0-255 scale becomes std sqrt(10)/255 here).
TRAIN_NOISE_STD = math.sqrt(10.0) / 255.0

TRAIN_MENU: tuple[DistortionSpec, ...] = (
    DistortionSpec("jpeg_approx", {"quality_range": (30.0, 90.0)}),
    DistortionSpec("crop_resize", {"side_range": (0.5, 1.0)}),
    DistortionSpec("gaussian_blur", {"kernel_range": (3, 9), "sigma_range": (0.05, 2.0)}),
    DistortionSpec("gaussian_noise", {"std": TRAIN_NOISE_STD}),
    DistortionSpec(
        "color_jitter",
        {
            "brightness": (0.8, 1.25),
            "contrast": (0.8, 1.25),
            "saturation": (0.8, 1.25),
            "hue": (-0.2, 0.2),
        },
    ),
)

# Eval-time suite: fixed settings used by the robustness sweep.
EVAL_SUITE: dict[str, DistortionSpec] = {
    "clean": DistortionSpec("identity", {}, differentiable=True),
    "jpeg": DistortionSpec("jpeg_approx", {"quality": 50.0, "real_codec": True}, differentiable=False),
    "crop": DistortionSpec("crop_resize", {"side": 0.8}, differentiable=True),
    "blur": DistortionSpec("gaussian_blur", {"kernel": 3, "sigma": 4.0}),
    "noise": DistortionSpec("gaussian_noise", {"std": math.sqrt(0.1)}),
    "jitter": DistortionSpec(
        "color_jitter",
        {
            "brightness": (0.9, 1.1),
            "contrast": (0.9, 1.1),
            "saturation": (0.9, 1.1),
            "hue": (-0.1, 0.1),
        },
    ),
    "denoise": DistortionSpec("denoise_regen", {"strength": 0.1, "steps": 10}, differentiable=False),
    "denoise2": DistortionSpec("denoise_regen", {"strength": 0.2, "steps": 10}, differentiable=False),
}


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=rng).item()


def _dct_matrix(n: int = 8) -> torch.Tensor:
    k = torch.arange(n, dtype=torch.float64)
    mat = torch.cos(math.pi / n * (k[None, :] + 0.5) * k[:, None])
    mat[0] *= 1.0 / math.sqrt(2.0)
    return (mat * math.sqrt(2.0 / n)).float()


_DCT8 = _dct_matrix(8)


def _jpeg_keep_mask(quality: float) -> torch.Tensor:
    """Quality-dependent low-frequency keep mask over an 8x8 DCT block."""
    keep = max(1, round(15.0 * quality / 100.0))
    u = torch.arange(8)
    return ((u[:, None] + u[None, :]) < keep).float()


def jpeg_approx_train(img: torch.Tensor, quality: float) -> torch.Tensor:
    """Differentiable JPEG proxy: blockwise DCT with high-frequency zeroing."""
    b, c, h, w = img.shape
    if h % 8 or w % 8:
        raise ConfigError("jpeg approximation needs dimensions divisible by 8")
    blocks = img.reshape(b, c, h // 8, 8, w // 8, 8).permute(0, 1, 2, 4, 3, 5)
    dct = _DCT8.to(img.dtype)
    coef = dct @ (blocks - 0.5) @ dct.T
    coef = coef * _jpeg_keep_mask(quality).to(img.dtype)
    out = dct.T @ coef @ dct + 0.5
    out = out.permute(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
    return out.clamp(0.0, 1.0)


def real_jpeg(img: torch.Tensor, quality: int) -> torch.Tensor:
    """Round-trip each image through the actual JPEG codec."""
    outs = []
    for one in img.detach().cpu():
        arr = (one.clamp(0, 1).numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        back = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        outs.append(torch.from_numpy(back.transpose(2, 0, 1)))
    return torch.stack(outs)


def crop_resize(img: torch.Tensor, side_fraction: float, rng: torch.Generator) -> torch.Tensor:
    """Random crop to a fraction of each side, then resize back (bilinear)."""
    _, _, h, w = img.shape
    ch = max(2, round(side_fraction * h))
    cw = max(2, round(side_fraction * w))
    top = int(torch.randint(0, h - ch + 1, (), generator=rng))
    left = int(torch.randint(0, w - cw + 1, (), generator=rng))
    patch = img[:, :, top : top + ch, left : left + cw]
    out = F.interpolate(patch, size=(h, w), mode="bilinear", align_corners=False)
    return out.clamp(0.0, 1.0)


def _gaussian_kernel(kernel: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(kernel, dtype=dtype) - (kernel - 1) / 2.0
    k1 = torch.exp(-0.5 * (x / sigma) ** 2)
    k1 = k1 / k1.sum()
    return k1[:, None] @ k1[None, :]


def gaussian_blur(img: torch.Tensor, kernel: int, sigma: float) -> torch.Tensor:
    if kernel % 2 == 0 or kernel < 1:
        raise ConfigError("blur kernel must be odd and positive")
    c = img.shape[1]
    k2 = _gaussian_kernel(kernel, sigma, dtype=img.dtype).expand(c, 1, kernel, kernel)
    pad = kernel // 2
    padded = F.pad(img, (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(padded, k2, groups=c).clamp(0.0, 1.0)


def gaussian_noise(img: torch.Tensor, std: float, rng: torch.Generator) -> torch.Tensor:
    noise = torch.randn(img.shape, generator=rng, dtype=img.dtype) * std
    return (img + noise).clamp(0.0, 1.0)


_RGB_TO_YIQ = torch.tensor(
    [[0.299, 0.587, 0.114], [0.5959, -0.2746, -0.3213], [0.2115, -0.5227, 0.3112]]
)


def color_jitter(
    img: torch.Tensor,
    rng: torch.Generator,
    brightness: tuple[float, float],
    contrast: tuple[float, float],
    saturation: tuple[float, float],
    hue: tuple[float, float],
) -> torch.Tensor:
    """Brightness/contrast/saturation scaling plus a YIQ hue rotation."""
    out = img * _uniform(rng, *brightness)

    mean = out.mean(dim=(1, 2, 3), keepdim=True)
    out = (out - mean) * _uniform(rng, *contrast) + mean

    yiq = _RGB_TO_YIQ.to(img.dtype)
    gray = (out * yiq[0][None, :, None, None]).sum(dim=1, keepdim=True)
    out = gray + (out - gray) * _uniform(rng, *saturation)

    theta = 2.0 * math.pi * _uniform(rng, *hue)
    rot = torch.tensor(
        [
            [1.0, 0.0, 0.0],
            [0.0, math.cos(theta), -math.sin(theta)],
            [0.0, math.sin(theta), math.cos(theta)],
        ],
        dtype=img.dtype,
    )
    m = torch.linalg.inv(yiq) @ rot @ yiq
    out = torch.einsum("rc,bchw->brhw", m, out)
    return out.clamp(0.0, 1.0)


def denoise_regen(
    img: torch.Tensor,
    clean_unet,
    vae,
    sched: DiffusionSchedule,
    strength: float,
    rng: torch.Generator,
    steps: int = 10,
) -> torch.Tensor:
    """Regeneration attack: noise the latent to strength*T and re-denoise.

    Uses the clean (unwatermarked) model unconditionally, so any latent
    watermark offset is treated as noise to be removed.
    """
    from .diffusion import sample_latents

    if not 0.0 < strength < 1.0:
        raise ConfigError(f"regeneration strength must be in (0, 1), got {strength}")
    with torch.no_grad():
        z = vae.encode(img)
        t_start = max(1, round(strength * sched.T))
        eps = torch.randn(z.shape, generator=rng)
        z_t = forward_diffuse(z, t_start, eps, sched)
        z_out = sample_latents(
            clean_unet, sched, n=len(img), class_id=None, sampler="ddim",
            steps=steps, guidance_scale=1.0, seed=rng, init=z_t, t_start=t_start,
        )
        return vae.decode(z_out).clamp(0.0, 1.0)


class RegenContext:
    """Bundles the clean model needed by the regeneration distortion."""

    def __init__(self, unet, vae, sched: DiffusionSchedule):
        self.unet = unet
        self.vae = vae
        self.sched = sched


def apply(
    spec: DistortionSpec,
    img: torch.Tensor,
    rng: torch.Generator,
    regen_ctx: RegenContext | None = None,
) -> torch.Tensor:
    """Apply one distortion; deterministic given the generator state."""
    if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise ValueError("input image must lie in [0, 1]")
    p = spec.params
    if spec.kind == "identity":
        return img
    if spec.kind == "jpeg_approx":
        quality = p["quality"] if "quality" in p else _uniform(rng, *p["quality_range"])
        if p.get("real_codec"):
            return real_jpeg(img, int(quality))
        return jpeg_approx_train(img, float(quality))
    if spec.kind == "crop_resize":
        side = p["side"] if "side" in p else _uniform(rng, *p["side_range"])
        return crop_resize(img, float(side), rng)
    if spec.kind == "gaussian_blur":
        if "kernel" in p:
            kernel, sigma = int(p["kernel"]), float(p["sigma"])
        else:
            lo, hi = p["kernel_range"]
            kernel = int(torch.randint(lo // 2, hi // 2 + 1, (), generator=rng)) * 2 + 1
            sigma = _uniform(rng, *p["sigma_range"])
        return gaussian_blur(img, kernel, sigma)
    if spec.kind == "gaussian_noise":
        return gaussian_noise(img, float(p["std"]), rng)
    if spec.kind == "color_jitter":
        return color_jitter(
            img, rng,
            brightness=tuple(p["brightness"]), contrast=tuple(p["contrast"]),
            saturation=tuple(p["saturation"]), hue=tuple(p["hue"]),
        )
    if spec.kind == "denoise_regen":
        if regen_ctx is None:
            raise ConfigError("denoise_regen requires a clean-model context")
        return denoise_regen(
            img, regen_ctx.unet, regen_ctx.vae, regen_ctx.sched,
            strength=float(p["strength"]), rng=rng, steps=int(p.get("steps", 10)),
        )
    raise ConfigError(f"unknown distortion kind {spec.kind!r}")


def menu_by_name(names) -> tuple[DistortionSpec, ...]:
    """Select train-menu entries by kind name."""
    by_kind = {spec.kind: spec for spec in TRAIN_MENU}
    out = []
    for name in names:
        if name not in by_kind:
            raise ConfigError(f"unknown train distortion {name!r}")
        out.append(by_kind[name])
    return tuple(out)
