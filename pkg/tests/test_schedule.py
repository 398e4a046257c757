import math

import pytest
import torch

from latentmark.config import ConfigError
from latentmark.schedule import forward_diffuse, make_schedule


def running_product_oracle(betas):
    """Plain-Python cumulative product, independent of torch.cumprod."""
    out, prod = [], 1.0
    for b in betas:
        prod *= 1.0 - float(b)
        out.append(prod)
    return out


def test_linear_schedule_first_alpha_bar():
    sched = make_schedule(1000, "linear", 1e-4, 0.02)
    assert sched.alpha_bar(1).item() == pytest.approx(1.0 - 1e-4, abs=1e-12)


def test_constant_beta_half_alpha_bar():
    sched = make_schedule(2, "linear", 0.5, 0.5)
    assert sched.alpha_bar(2).item() == pytest.approx(0.25, abs=1e-12)


def test_alpha_bars_match_running_product_oracle():
    for kind in ("linear", "cosine"):
        sched = make_schedule(1000, kind)
        oracle = running_product_oracle(sched.betas.tolist())
        diffs = [abs(a - b) for a, b in zip(sched.alpha_bars.tolist(), oracle)]
        assert max(diffs) < 1e-10


def test_alpha_bar_monotone_and_in_range():
    for kind in ("linear", "cosine"):
        sched = make_schedule(500, kind)
        bars = sched.alpha_bars
        assert (bars[1:] < bars[:-1]).all()
        assert (bars > 0).all() and (bars <= 1).all()


def test_posterior_variance_definition():
    sched = make_schedule(100, "linear")
    # sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, with abar_0 = 1
    for t in (1, 2, 50, 100):
        prev = sched.alpha_bar(t - 1)
        expect = (1 - prev) / (1 - sched.alpha_bar(t)) * sched.betas[t - 1]
        assert sched.posterior_vars[t - 1].item() == pytest.approx(expect.item(), rel=1e-12)
    assert sched.posterior_vars[0].item() == 0.0


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        make_schedule(1)
    with pytest.raises(ConfigError):
        make_schedule(10, "quadratic")


def test_forward_diffuse_limit_returns_z0():
    sched = make_schedule(2, "linear", 1e-12, 1e-12)
    z0 = torch.randn(4, 8, 8)
    out = forward_diffuse(z0, 1, torch.randn(4, 8, 8), sched)
    assert torch.allclose(out, z0, atol=1e-5)


def test_forward_diffuse_zero_signal():
    sched = make_schedule(2, "linear", 0.5, 0.5)
    eps = torch.randn(4, 8, 8)
    out = forward_diffuse(torch.zeros(4, 8, 8), 1, eps, sched)
    assert torch.allclose(out, math.sqrt(0.5) * eps, atol=1e-6)


def test_forward_diffuse_hand_arithmetic():
    # abar_2 = 0.25 -> ones diffuse to 0.5 + sqrt(0.75)
    sched = make_schedule(2, "linear", 0.5, 0.5)
    out = forward_diffuse(torch.ones(2, 3, 3), 2, torch.ones(2, 3, 3), sched)
    assert torch.allclose(out, torch.full((2, 3, 3), 0.5 + math.sqrt(0.75)), atol=1e-6)


def test_forward_diffuse_linearity():
    sched = make_schedule(50, "linear")
    z0, eps = torch.randn(2, 4, 4, 4), torch.randn(2, 4, 4, 4)
    for a in (0.0, 0.5, -2.0):
        lhs = forward_diffuse(a * z0, 7, a * eps, sched)
        rhs = a * forward_diffuse(z0, 7, eps, sched)
        assert torch.allclose(lhs, rhs, atol=1e-5)


def test_forward_diffuse_per_sample_timesteps():
    sched = make_schedule(50, "linear")
    z0, eps = torch.randn(3, 2, 4, 4), torch.randn(3, 2, 4, 4)
    batched = forward_diffuse(z0, torch.tensor([1, 25, 50]), eps, sched)
    for i, t in enumerate((1, 25, 50)):
        single = forward_diffuse(z0[i : i + 1], t, eps[i : i + 1], sched)
        assert torch.allclose(batched[i], single[0], atol=1e-6)


def test_forward_diffuse_errors():
    sched = make_schedule(10, "linear")
    z0 = torch.zeros(2, 3, 3)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 3, torch.zeros(2, 3, 4), sched)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 0, torch.zeros_like(z0), sched)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 11, torch.zeros_like(z0), sched)
