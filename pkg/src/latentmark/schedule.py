"""Diffusion noise schedules and the closed-form forward process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .config import ConfigError, ScheduleConfig


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule over timesteps 1..T.

    Arrays are float64 and 0-indexed: ``betas[i]`` is the beta for timestep
    ``t = i + 1``.  ``posterior_vars[i]`` is the variance of the reverse
    posterior q(z_{t-1} | z_t, z_0) at ``t = i + 1`` (zero at t=1).
    """

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    posterior_vars: torch.Tensor

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int | torch.Tensor) -> torch.Tensor:
        """Cumulative product at timestep ``t`` (1-based); alpha_bar(0) == 1."""
        if isinstance(t, torch.Tensor):
            out = torch.ones_like(t, dtype=torch.float64)
            pos = t > 0
            out[pos] = self.alpha_bars[t[pos] - 1]
            return out
        if t == 0:
            return torch.tensor(1.0, dtype=torch.float64)
        return self.alpha_bars[t - 1]


def make_schedule(
    T: int,
    schedule_kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> DiffusionSchedule:
    """Build a schedule with T timesteps.

    ``linear`` interpolates betas between ``beta_start`` and ``beta_end``;
    ``cosine`` derives betas from the squared-cosine cumulative-alpha curve.
    """
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if schedule_kind == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif schedule_kind == "cosine":
        s = 0.008
        grid = torch.arange(T + 1, dtype=torch.float64) / T
        abar = torch.cos((grid + s) / (1 + s) * math.pi / 2) ** 2
        abar = abar / abar[0]
        betas = (1.0 - abar[1:] / abar[:-1]).clamp(1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind: {schedule_kind!r}")

    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
    posterior_vars = (1.0 - prev) / (1.0 - alpha_bars) * betas
    return DiffusionSchedule(betas, alphas, alpha_bars, posterior_vars)


def schedule_from_config(cfg: ScheduleConfig) -> DiffusionSchedule:
    return make_schedule(cfg.timesteps, cfg.kind, cfg.beta_start, cfg.beta_end)


def forward_diffuse(
    z0: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Noise a clean latent to timestep t: sqrt(abar_t) z0 + sqrt(1-abar_t) eps.

    ``t`` is 1-based; a tensor ``t`` of shape (batch,) applies per-sample
    timesteps along the leading dimension.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    if isinstance(t, torch.Tensor):
        if (t < 1).any() or (t > sched.T).any():
            raise ValueError("timesteps must be in [1, T]")
        abar = sched.alpha_bar(t).to(z0.dtype)
        abar = abar.view(-1, *([1] * (z0.dim() - 1)))
    else:
        if not 1 <= t <= sched.T:
            raise ValueError(f"timestep {t} outside [1, {sched.T}]")
        abar = sched.alpha_bar(int(t)).to(z0.dtype)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
