"""Watermark payloads: fixed-length bit vectors and parsing helpers."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch


class PayloadError(ValueError):
    """Raised for malformed secrets (wrong length, non-binary entries)."""


def as_bits(secret: Sequence[int] | np.ndarray | torch.Tensor) -> np.ndarray:
    """Normalize a secret to a 1-D int array of 0/1, validating entries."""
    if isinstance(secret, torch.Tensor):
        secret = secret.detach().cpu().numpy()
    bits = np.asarray(secret)
    if bits.ndim != 1:
        raise PayloadError(f"secret must be 1-D, got shape {bits.shape}")
    bits = bits.round().astype(np.int64)
    if not np.isin(bits, (0, 1)).all():
        raise PayloadError("secret entries must be 0 or 1")
    return bits


def bits_tensor(secret, dtype=torch.float32) -> torch.Tensor:
    """Secret as a float tensor suitable as network input."""
    return torch.from_numpy(as_bits(secret)).to(dtype)


def random_secret(length: int, rng: np.random.Generator | int) -> np.ndarray:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return rng.integers(0, 2, size=length).astype(np.int64)


def random_secret_batch(n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=(n, length)).astype(np.int64)


def parse_secret(text: str, length: int) -> np.ndarray:
    """Parse a secret given as a bit string ('0101...') or hex ('0xA3f1')."""
    text = text.strip()
    if text.lower().startswith("0x"):
        value = int(text, 16)
        if value >= 1 << length:
            raise PayloadError(f"hex secret does not fit in {length} bits")
        bits = [(value >> (length - 1 - i)) & 1 for i in range(length)]
        return np.array(bits, dtype=np.int64)
    if set(text) <= {"0", "1"}:
        if len(text) != length:
            raise PayloadError(f"expected {length} bits, got {len(text)}")
        return np.array([int(c) for c in text], dtype=np.int64)
    raise PayloadError(f"cannot parse secret {text!r}")


def format_secret(secret: Iterable[int]) -> str:
    return "".join(str(int(b)) for b in as_bits(list(secret)))
