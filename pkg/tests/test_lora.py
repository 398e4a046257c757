import math

import numpy as np
import pytest
import torch

from latentmark.config import ConfigError
from latentmark.errors import MergeError
from latentmark.lora import (
    SecretConditionedUNet,
    WatermarkLoRA,
    build_scaling_matrix,
    init_mapper,
    lora_delta,
    merge,
    select_target_shapes,
)
from latentmark.nets import CondUNet
from latentmark.payload import random_secret


def tiny_unet():
    return CondUNet(latent_channels=4, base_channels=16, emb_dim=32, num_classes=4)


def make_lora(unet, rank=8, bits=4, seed=0, init="orthogonal"):
    shapes = select_target_shapes(unet, ("attn", "ff", "conv"))
    return WatermarkLoRA(shapes, payload_bits=bits, rank=rank, init_mode=init, seed=seed)


def randomize(lora, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in lora.A.values():
            p.copy_(torch.randn(p.shape, generator=g) * 0.1)
    return lora


def test_mapper_orthogonal_gram_is_diagonal():
    mapper = init_mapper(4, 8, "orthogonal", seed=0)
    gram = mapper.embeddings @ mapper.embeddings.T
    off = gram - torch.diag(torch.diag(gram))
    assert off.abs().max().item() < 1e-6


def test_mapper_normal_seed_deterministic():
    a = init_mapper(6, 12, "normal", seed=9)
    b = init_mapper(6, 12, "normal", seed=9)
    assert torch.equal(a.embeddings, b.embeddings)


def test_mapper_rank_guard():
    with pytest.raises(ConfigError):
        init_mapper(8, 4, "orthogonal")
    with pytest.raises(ConfigError):
        init_mapper(4, 8, "fancy")


def test_mapper_paper_scale_smoke():
    mapper = init_mapper(48, 320, "orthogonal", seed=0)
    gram = mapper.embeddings @ mapper.embeddings.T
    off = gram - torch.diag(torch.diag(gram))
    assert off.abs().max().item() < 1e-4  # 48x320 QR at float64, cast to float32


def test_scaling_matrix_all_zero_secret_is_identity():
    mapper = init_mapper(5, 8, "normal", seed=1)
    diag = build_scaling_matrix([0, 0, 0, 0, 0], mapper)
    assert torch.allclose(diag, torch.ones(8))


def test_scaling_matrix_single_bit_formula():
    mapper = init_mapper(1, 2, "normal", seed=0)
    with torch.no_grad():
        mapper.embeddings.copy_(torch.tensor([[2.0, 0.0]]))
    diag = build_scaling_matrix([1], mapper)
    assert torch.allclose(diag, torch.tensor([3.0, 1.0]))


def test_scaling_matrix_summation_oracle():
    mapper = init_mapper(4, 6, "normal", seed=2)
    secret = [1, 1, 0, 0]
    diag = build_scaling_matrix(secret, mapper)
    emb = mapper.embeddings.detach().numpy()
    expected = np.ones(6)
    for i, bit in enumerate(secret):
        if bit:
            expected += emb[i] / math.sqrt(4)
    assert np.allclose(diag.numpy(), expected, atol=1e-6)


def test_lora_delta_identity_and_zero():
    A = torch.randn(5, 3)
    B = torch.randn(3, 4)
    assert torch.allclose(lora_delta(A, B, torch.ones(3)), A @ B, atol=1e-6)
    assert torch.equal(lora_delta(torch.zeros(5, 3), B, torch.ones(3)), torch.zeros(5, 4))
    assert torch.equal(lora_delta(A, torch.zeros(3, 4), torch.ones(3)), torch.zeros(5, 4))


def test_lora_delta_hand_case():
    A = torch.eye(2)
    B = torch.tensor([[1.0, 1.0], [1.0, 0.0]])
    out = lora_delta(A, B, torch.tensor([2.0, 3.0]))
    assert torch.equal(out, torch.tensor([[2.0, 2.0], [3.0, 0.0]]))


def test_lora_delta_shape_guard():
    with pytest.raises(ValueError):
        lora_delta(torch.randn(2, 3), torch.randn(4, 2), torch.ones(3))


def test_merge_alpha_zero_is_identity():
    unet = tiny_unet()
    lora = randomize(make_lora(unet))
    merged = merge(unet, lora, random_secret(4, 0), alpha=0.0)
    for (na, pa), (nb, pb) in zip(unet.named_parameters(), merged.named_parameters()):
        assert na == nb and torch.equal(pa, pb)


def test_merge_then_inverse_recovers_base():
    unet = tiny_unet()
    lora = randomize(make_lora(unet))
    secret = random_secret(4, 1)
    merged = merge(unet, lora, secret, alpha=1.05)
    restored = merge(merged, lora, secret, alpha=-1.05)
    for (name, pa), pb in zip(unet.named_parameters(), restored.parameters()):
        denom = pa.abs().max().clamp_min(1e-8)
        assert ((pa - pb).abs().max() / denom).item() < 1e-5, name


def test_merge_pure_and_localized():
    unet = tiny_unet()
    before = {k: v.clone() for k, v in unet.state_dict().items()}
    lora = randomize(make_lora(unet))
    m1 = merge(unet, lora, [0, 0, 1, 1], alpha=1.0)
    m2 = merge(unet, lora, [1, 1, 0, 0], alpha=1.0)
    # input untouched
    for k, v in unet.state_dict().items():
        assert torch.equal(v, before[k])
    # two merges differ only in target layers
    targets = set(lora.target_names)
    for (name, p1), p2 in zip(m1.named_parameters(), m2.parameters()):
        if name in targets:
            assert not torch.equal(p1, p2), name
        else:
            assert torch.equal(p1, p2), name


def test_merge_missing_layer_lists_name():
    unet = tiny_unet()
    shapes = {"not.a.layer.weight": (4, 4)}
    lora = WatermarkLoRA(shapes, payload_bits=4, rank=4, init_mode="normal")
    with pytest.raises(MergeError, match="not.a.layer.weight"):
        merge(unet, lora, [0, 1, 0, 1], alpha=1.0)


def test_secret_delta_decomposition_invariant():
    # delta(s) - delta(all zeros) == A * diag(bit sum) * B, exactly (linearity)
    rng = np.random.default_rng(0)
    g = torch.Generator().manual_seed(0)
    for trial in range(100):
        l, r, n, m = 6, 8, 5, 7
        mapper = init_mapper(l, r, "normal", seed=trial)
        A = torch.randn(n, r, generator=g)
        B = torch.randn(r, m, generator=g)
        secret = rng.integers(0, 2, size=l)
        diag_s = build_scaling_matrix(secret, mapper)
        diag_0 = build_scaling_matrix(np.zeros(l, dtype=int), mapper)
        lhs = lora_delta(A, B, diag_s) - lora_delta(A, B, diag_0)
        bitsum = mapper.bit_sum(torch.from_numpy(secret).float())
        rhs = (A * bitsum[None, :]) @ B
        assert (lhs - rhs).abs().max().item() < 1e-9


def test_rank_bound():
    unet = tiny_unet()
    lora = randomize(make_lora(unet, rank=4))
    diag = build_scaling_matrix([1, 0, 1, 0], lora.mapper)
    for name in lora.target_names:
        delta = lora.delta(name, diag).flatten(1)
        assert torch.linalg.matrix_rank(delta, tol=1e-5).item() <= 4


def test_conditioned_params_match_merge():
    unet = tiny_unet()
    lora = randomize(make_lora(unet))
    secret = random_secret(4, 5)
    overrides = lora.conditioned_params(unet, secret, alpha=1.05)
    merged = merge(unet, lora, secret, alpha=1.05)
    params = dict(merged.named_parameters())
    for name, value in overrides.items():
        assert torch.allclose(value, params[name], atol=1e-6)


def test_secret_conditioned_forward_equals_merged_model():
    unet = tiny_unet()
    lora = randomize(make_lora(unet))
    secret = random_secret(4, 2)
    wrapped = SecretConditionedUNet(unet, lora, secret, alpha=1.0)
    merged = merge(unet, lora, secret, alpha=1.0)
    z = torch.randn(2, 4, 8, 8)
    t = torch.tensor([3, 500])
    c = torch.tensor([0, 4])
    with torch.no_grad():
        assert torch.allclose(wrapped(z, t, c), merged(z, t, c), atol=1e-5)


def test_untrained_lora_is_noop():
    unet = tiny_unet()
    lora = make_lora(unet)  # A starts at zero
    merged = merge(unet, lora, random_secret(4, 3), alpha=1.0)
    for pa, pb in zip(unet.parameters(), merged.parameters()):
        assert torch.equal(pa, pb)
