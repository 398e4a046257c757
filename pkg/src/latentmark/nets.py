"""Network architectures: autoencoder, conditional U-Net, secret codec.

Everything is sized for 32x32 RGB images with a (4, 8, 8) latent.  The U-Net
exposes ``lora_target_names`` so the low-rank adapter can locate its
attention/feed-forward projections and residual-block convolutions by
parameter name.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard fixed sin/cos embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ConvAutoencoder(nn.Module):
    """Tiny convolutional autoencoder mapping images to a 4x-downsampled latent.

    ``latent_scale`` is calibrated after training so encoded latents have
    roughly unit standard deviation; encode/decode apply it transparently.
    """

    def __init__(self, image_channels: int = 3, latent_channels: int = 4, base_channels: int = 32):
        super().__init__()
        self.hparams = {
            "image_channels": image_channels,
            "latent_channels": latent_channels,
            "base_channels": base_channels,
        }
        c = base_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(image_channels, c, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, latent_channels, 3, padding=1),
        )
        # Pixel-shuffle upsampling keeps almost all decoder compute at the
        # latent resolution, which matters on small CPU budgets.
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * c, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, 16 * 4, 3, padding=1),
            nn.PixelShuffle(2),
            nn.SiLU(),
            nn.Conv2d(16, 8 * 4, 3, padding=1),
            nn.PixelShuffle(2),
            nn.SiLU(),
            nn.Conv2d(8, image_channels, 3, padding=1),
        )
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        return self.encoder(img) * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z / self.latent_scale))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(img))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        groups = min(8, in_ch)
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TransformerBlock(nn.Module):
    """Single-head self-attention followed by a two-layer feed-forward."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, channels), channels)
        self.attn_qkv = nn.Linear(channels, 3 * channels)
        self.attn_out = nn.Linear(channels, channels)
        self.norm2 = nn.GroupNorm(min(8, channels), channels)
        self.ff_in = nn.Linear(channels, 2 * channels)
        self.ff_out = nn.Linear(2 * channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm1(x).flatten(2).transpose(1, 2)  # (b, hw, c)
        q, k, v = self.attn_qkv(tokens).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        tokens = self.attn_out(attn @ v)
        x = x + tokens.transpose(1, 2).reshape(b, c, h, w)

        tokens = self.norm2(x).flatten(2).transpose(1, 2)
        tokens = self.ff_out(F.silu(self.ff_in(tokens)))
        return x + tokens.transpose(1, 2).reshape(b, c, h, w)


class CondUNet(nn.Module):
    """Class-conditional noise predictor for the toy latent geometry.

    Conditioning is a learned class embedding added to the timestep
    embedding; index ``num_classes`` is the reserved NULL token used for
    classifier-free guidance.
    """

    def __init__(
        self,
        latent_channels: int = 4,
        base_channels: int = 48,
        emb_dim: int = 96,
        num_classes: int = 10,
    ):
        super().__init__()
        self.hparams = {
            "latent_channels": latent_channels,
            "base_channels": base_channels,
            "emb_dim": emb_dim,
            "num_classes": num_classes,
        }
        self.num_classes = num_classes
        self.null_class = num_classes
        c = base_channels

        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.class_emb = nn.Embedding(num_classes + 1, emb_dim)
        self.emb_dim = emb_dim

        self.conv_in = nn.Conv2d(latent_channels, c, 3, padding=1)
        self.res_down = ResBlock(c, c, emb_dim)
        self.downsample = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.res_mid1 = ResBlock(2 * c, 2 * c, emb_dim)
        self.mid_attn = TransformerBlock(2 * c)
        self.res_mid2 = ResBlock(2 * c, 2 * c, emb_dim)
        self.up_conv = nn.Conv2d(2 * c, c, 3, padding=1)
        self.res_up = ResBlock(2 * c, c, emb_dim)
        self.out_norm = nn.GroupNorm(min(8, c), c)
        self.conv_out = nn.Conv2d(c, latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(sinusoidal_embedding(t, self.emb_dim)) + self.class_emb(c)
        h = self.conv_in(z)
        skip = self.res_down(h, emb)
        h = self.downsample(skip)
        h = self.res_mid1(h, emb)
        h = self.mid_attn(h)
        h = self.res_mid2(h, emb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up_conv(h)
        h = self.res_up(torch.cat([h, skip], dim=1), emb)
        return self.conv_out(F.silu(self.out_norm(h)))

    def lora_target_names(self) -> list[str]:
        """Parameter names eligible for low-rank adaptation."""
        names = []
        for name, module in self.named_modules():
            if isinstance(module, TransformerBlock):
                names += [f"{name}.{p}.weight" for p in ("attn_qkv", "attn_out", "ff_in", "ff_out")]
            elif isinstance(module, ResBlock):
                names += [f"{name}.conv1.weight", f"{name}.conv2.weight"]
        params = dict(self.named_parameters())
        return [n for n in names if n in params]


class SecretEncoder(nn.Module):
    """Maps an l-bit secret to a cover-agnostic latent offset.

    A small MLP expands the bits to a 2x2 feature map which transposed
    convolutions upsample to the latent geometry; there is no final zero
    convolution, so untrained outputs are small but non-degenerate.
    """

    def __init__(
        self,
        payload_bits: int = 16,
        latent_channels: int = 4,
        latent_size: int = 8,
        hidden: int = 128,
        base_channels: int = 64,
    ):
        super().__init__()
        if latent_size < 4 or latent_size & (latent_size - 1):
            raise ValueError("latent_size must be a power of two >= 4")
        self.hparams = {
            "payload_bits": payload_bits,
            "latent_channels": latent_channels,
            "latent_size": latent_size,
            "hidden": hidden,
            "base_channels": base_channels,
        }
        self.payload_bits = payload_bits
        c = base_channels
        self.fc = nn.Sequential(nn.Linear(payload_bits, hidden), nn.SiLU(), nn.Linear(hidden, c * 4))
        ups = []
        ch = c
        for _ in range(int(math.log2(latent_size // 2))):
            ups += [nn.ConvTranspose2d(ch, max(ch // 2, 8), 4, stride=2, padding=1), nn.SiLU()]
            ch = max(ch // 2, 8)
        self.upsample = nn.Sequential(*ups)
        self.out_conv = nn.Conv2d(ch, latent_channels, 3, padding=1)

    def forward(self, bits: torch.Tensor) -> torch.Tensor:
        if bits.dim() == 1:
            bits = bits[None]
        if bits.shape[-1] != self.payload_bits:
            raise ValueError(f"expected {self.payload_bits} bits, got {bits.shape[-1]}")
        h = self.fc(bits.float()).reshape(bits.shape[0], -1, 2, 2)
        return self.out_conv(self.upsample(h))


class SecretDecoder(nn.Module):
    """Convolutional classifier extracting l bit logits from an image."""

    def __init__(self, payload_bits: int = 16, image_channels: int = 3, base_channels: int = 32):
        super().__init__()
        self.hparams = {
            "payload_bits": payload_bits,
            "image_channels": image_channels,
            "base_channels": base_channels,
        }
        self.payload_bits = payload_bits
        c = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(image_channels, c, 3, padding=1),
            nn.GroupNorm(8, c),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.GroupNorm(8, 2 * c),
            nn.SiLU(),
            nn.Conv2d(2 * c, 3 * c, 3, stride=2, padding=1),
            nn.GroupNorm(8, 3 * c),
            nn.SiLU(),
            nn.Conv2d(3 * c, 4 * c, 3, stride=2, padding=1),
            nn.GroupNorm(8, 4 * c),
            nn.SiLU(),
        )
        self.head = nn.Linear(4 * c, payload_bits)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        h = self.features(img)
        h = h.mean(dim=(2, 3))
        return self.head(h)


class RandomFeatureNet(nn.Module):
    """Frozen random convolutional feature extractor (perceptual proxy).

    Weights are drawn from a dedicated generator with a fixed seed, so the
    feature space is identical across processes and runs.
    """

    SEED = 7321

    def __init__(self, image_channels: int = 3):
        super().__init__()
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(image_channels, 16, 3, stride=1, padding=1),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, 64, 3, stride=2, padding=1),
            ]
        )
        g = torch.Generator().manual_seed(self.SEED)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = img
        for conv in self.convs:
            h = F.silu(conv(h))
            feats.append(h)
        return feats


def feature_distance(net: RandomFeatureNet, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Channel-normalized squared feature distance, averaged over layers.

    Mirrors the perceptual-distance recipe of unit-normalizing each spatial
    feature vector before comparing, so the scale is stable across layers.
    """
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = a.new_zeros(())
    feats_a, feats_b = net(a), net(b)
    for fa, fb in zip(feats_a, feats_b):
        na = fa / (fa.square().sum(dim=1, keepdim=True).sqrt() + 1e-8)
        nb = fb / (fb.square().sum(dim=1, keepdim=True).sqrt() + 1e-8)
        total = total + (na - nb).square().sum(dim=1).mean()
    return total / len(feats_a)
