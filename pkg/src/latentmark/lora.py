"""Secret-conditioned low-rank adapter: mapper, scaling matrix, deltas, merge.

Each target layer gets factors A (n x r) and B (r x m); a shared mapper turns
an l-bit secret into a diagonal scaling so the weight delta A * diag(s) * B
depends on the payload.  Merging is a pure operation: it returns a new model
with W + alpha * delta baked into the target layers.
"""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

from .config import ConfigError
from .errors import MergeError
from .payload import bits_tensor

_SEP = "::"  # parameter-dict keys cannot contain dots


class SecretMapper(nn.Module):
    """Learnable per-bit embeddings I_1..I_l of length r.

    Bit i maps to I_i when set and to the zero vector otherwise; the scaling
    diagonal is 1 + (1/sqrt(l)) * sum of the active embeddings.
    """

    def __init__(self, payload_bits: int, rank: int, init_mode: str, seed: int = 0):
        super().__init__()
        if init_mode not in ("normal", "orthogonal"):
            raise ConfigError(f"unknown mapper init {init_mode!r}")
        if init_mode == "orthogonal" and rank < payload_bits:
            raise ConfigError(
                f"orthogonal init needs rank >= payload bits ({rank} < {payload_bits})"
            )
        self.payload_bits = payload_bits
        self.rank = rank
        self.init_mode = init_mode
        g = torch.Generator().manual_seed(seed)
        if init_mode == "normal":
            emb = torch.randn(payload_bits, rank, generator=g)
        else:
            # Orthonormal rows scaled by sqrt(r) so row norms match the
            # expected norm of a standard-normal embedding.
            gauss = torch.randn(rank, payload_bits, generator=g, dtype=torch.float64)
            q, _ = torch.linalg.qr(gauss)
            emb = (q.T * math.sqrt(rank)).float()
        self.embeddings = nn.Parameter(emb)

    def bit_sum(self, bits: torch.Tensor) -> torch.Tensor:
        """(1/sqrt(l)) * sum_i f_i(b_i) for a single secret."""
        if bits.numel() != self.payload_bits:
            raise ConfigError(f"secret length {bits.numel()} != {self.payload_bits}")
        return (bits.float() @ self.embeddings) / math.sqrt(self.payload_bits)


def init_mapper(payload_bits: int, rank: int, mode: str, seed: int = 0) -> SecretMapper:
    return SecretMapper(payload_bits, rank, mode, seed)


def build_scaling_matrix(secret, mapper: SecretMapper) -> torch.Tensor:
    """Diagonal of S: ones plus the normalized sum of active embeddings."""
    bits = bits_tensor(secret)
    return 1.0 + mapper.bit_sum(bits)


def lora_delta(A: torch.Tensor, B: torch.Tensor, diag: torch.Tensor) -> torch.Tensor:
    """Weight delta A * diag(S) * B; identity diag reduces to plain A @ B."""
    if A.shape[1] != diag.numel() or B.shape[0] != diag.numel():
        raise ValueError("rank mismatch between factors and scaling diagonal")
    return (A * diag[None, :]) @ B


class WatermarkLoRA(nn.Module):
    """Low-rank factors for a set of target layers plus the shared mapper.

    Factor A starts at zero so an untrained adapter is an exact no-op; B is
    Gaussian so gradients reach A immediately.  Conv kernels are treated as
    2-D matrices of shape (out, in*kh*kw).
    """

    def __init__(
        self,
        target_shapes: dict[str, tuple[int, ...]],
        payload_bits: int,
        rank: int,
        init_mode: str = "orthogonal",
        alpha_default: float = 1.05,
        seed: int = 0,
    ):
        super().__init__()
        if not target_shapes:
            raise ConfigError("no target layers selected")
        self.target_shapes = dict(target_shapes)
        self.rank = rank
        self.payload_bits = payload_bits
        self.alpha_default = alpha_default
        self.mapper = SecretMapper(payload_bits, rank, init_mode, seed=seed)
        g = torch.Generator().manual_seed(seed + 1)
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        for name, shape in target_shapes.items():
            n, m = shape[0], int(np.prod(shape[1:]))
            key = name.replace(".", _SEP)
            self.A[key] = nn.Parameter(torch.zeros(n, rank))
            self.B[key] = nn.Parameter(torch.randn(rank, m, generator=g) / math.sqrt(m))

    @property
    def target_names(self) -> list[str]:
        return list(self.target_shapes)

    def delta(self, name: str, diag: torch.Tensor) -> torch.Tensor:
        """Delta for one layer, reshaped to the layer's original shape."""
        key = name.replace(".", _SEP)
        return lora_delta(self.A[key], self.B[key], diag).reshape(self.target_shapes[name])

    def conditioned_params(
        self, model: nn.Module, secret, alpha: float = 1.0
    ) -> dict[str, torch.Tensor]:
        """Target-layer weights with the secret's delta added (for functional use)."""
        diag = build_scaling_matrix(secret, self.mapper)
        params = dict(model.named_parameters())
        out = {}
        for name in self.target_shapes:
            if name not in params:
                raise MergeError(f"model is missing target layer {name!r}")
            out[name] = params[name] + alpha * self.delta(name, diag)
        return out


def select_target_shapes(model: nn.Module, patterns) -> dict[str, tuple[int, ...]]:
    """Resolve LoRA targets: model candidates filtered by substring patterns."""
    candidates = model.lora_target_names()
    params = dict(model.named_parameters())
    chosen = {}
    for name in candidates:
        if any(p in name for p in patterns):
            chosen[name] = tuple(params[name].shape)
    if not chosen:
        raise ConfigError(f"no LoRA targets matched patterns {tuple(patterns)}")
    return chosen


def merge(model: nn.Module, lora: WatermarkLoRA, secret, alpha: float) -> nn.Module:
    """Return a new model with W + alpha * delta(secret) in each target layer."""
    merged = copy.deepcopy(model)
    params = dict(merged.named_parameters())
    missing = [n for n in lora.target_shapes if n not in params]
    if missing:
        raise MergeError(f"model is missing target layers: {missing}")
    diag = build_scaling_matrix(secret, lora.mapper)
    with torch.no_grad():
        for name in lora.target_shapes:
            params[name].add_(alpha * lora.delta(name, diag))
    return merged


class SecretConditionedUNet(nn.Module):
    """Read-only view of a base model with a secret's delta applied functionally.

    Useful wherever a merged model is needed transiently (sampling during
    decoder fine-tuning, sweeps over many secrets) without copying weights.
    """

    def __init__(self, unet: nn.Module, lora: WatermarkLoRA, secret, alpha: float):
        super().__init__()
        self.unet = unet
        self.num_classes = unet.num_classes
        self.null_class = unet.null_class
        self.hparams = unet.hparams
        with torch.no_grad():
            overrides = lora.conditioned_params(unet, secret, alpha)
        self._overrides = {k: v.detach() for k, v in overrides.items()}

    def forward(self, z, t, c):
        return functional_call(self.unet, self._overrides, (z, t, c))
