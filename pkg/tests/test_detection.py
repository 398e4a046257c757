import itertools
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmark import detection
from latentmark.detection import (
    CollusionReport,
    DetectionReport,
    bit_accuracy,
    collusion_bit_table,
    collusion_merge,
    evaluate_tpr,
    fpr,
    fpr_incomplete_beta,
    regularized_incomplete_beta,
    threshold_for_fpr,
)


def enumerate_fpr_oracle(secret, tau):
    """Count, over all 2^k bit vectors, how often matches strictly exceed tau."""
    k = len(secret)
    hits = 0
    for cand in itertools.product((0, 1), repeat=k):
        matches = sum(1 for a, b in zip(secret, cand) if a == b)
        if matches > tau:
            hits += 1
    return Fraction(hits, 2**k)


def test_bit_accuracy_basics():
    assert bit_accuracy([1, 0, 1, 1], [1, 0, 1, 1]) == 1.0
    assert bit_accuracy([1, 0, 1, 1], [0, 1, 0, 0]) == 0.0
    assert bit_accuracy([1, 0, 1, 1], [1, 0, 0, 0]) == 0.5
    with pytest.raises(ValueError):
        bit_accuracy([1, 0], [1, 0, 1])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=64).flatmap(
    lambda a: st.tuples(st.just(a), st.lists(st.integers(0, 1), min_size=len(a), max_size=len(a)))
))
def test_bit_accuracy_symmetric(pair):
    a, b = pair
    assert bit_accuracy(a, b) == bit_accuracy(b, a)


def test_fpr_single_term():
    assert fpr(16, 15) == pytest.approx(1 / 65536, abs=1e-15)


def test_fpr_empty_tail_is_zero():
    for k in (1, 8, 48, 128):
        assert fpr(k, k) == 0.0


def test_fpr_full_range_is_one_minus_all_wrong():
    # tau = -1 would give probability 1; tau = 0 excludes only the all-wrong vector
    assert fpr(8, 0) == pytest.approx(1 - 1 / 256, abs=1e-15)


def test_fpr_matches_enumeration_small_k():
    rng = np.random.default_rng(3)
    for k in range(1, 11):
        secret = rng.integers(0, 2, size=k)
        for tau in range(k + 1):
            oracle = enumerate_fpr_oracle(list(secret), tau)
            assert abs(fpr(k, tau) - float(oracle)) < 1e-12


def test_fpr_monotone_nonincreasing_in_tau():
    for k in (5, 16, 48):
        values = [fpr(k, tau) for tau in range(k + 1)]
        assert all(a >= b for a, b in zip(values, values[1:]))


def test_beta_and_binomial_paths_agree():
    for k in (1, 2, 7, 16, 33, 64):
        for tau in range(k + 1):
            assert abs(fpr(k, tau) - fpr_incomplete_beta(k, tau)) < 1e-10


def test_regularized_incomplete_beta_against_scipy():
    from scipy.special import betainc

    rng = np.random.default_rng(0)
    for _ in range(200):
        a = float(rng.uniform(0.2, 60))
        b = float(rng.uniform(0.2, 60))
        x = float(rng.uniform(0, 1))
        assert regularized_incomplete_beta(a, b, x) == pytest.approx(
            float(betainc(a, b, x)), abs=1e-10
        )


def test_threshold_for_fpr_known_points():
    # k=16: fpr(14) = 17/65536 ~ 2.6e-4 > 1e-4 >= fpr(15) = 1/65536
    assert threshold_for_fpr(16, 1e-4) == 15
    tau48 = threshold_for_fpr(48, 1e-6)
    assert fpr(48, tau48) <= 1e-6 < fpr(48, tau48 - 1)


def test_threshold_for_fpr_scan_oracle():
    for k in (4, 9, 16):
        for target in (0.5, 1e-2, 1e-4, 1e-9):
            tau = threshold_for_fpr(k, target)
            assert fpr(k, tau) <= target
            if tau > 0:
                assert fpr(k, tau - 1) > target


@given(st.integers(1, 64), st.floats(1e-9, 0.999))
@settings(max_examples=60)
def test_threshold_monotone_in_target(k, target):
    loose = threshold_for_fpr(k, min(0.999, target * 10))
    tight = threshold_for_fpr(k, target)
    assert loose <= tight


def test_threshold_rejects_bad_target():
    with pytest.raises(ValueError):
        threshold_for_fpr(16, 0.0)
    with pytest.raises(ValueError):
        threshold_for_fpr(16, 1.0)


def test_evaluate_tpr():
    secret = [1, 0, 1, 0]
    perfect = [secret] * 5
    assert evaluate_tpr(perfect, secret, tau=3) == 1.0
    # matches must STRICTLY exceed tau
    assert evaluate_tpr(perfect, secret, tau=4) == 0.0
    mixed = [secret, [0, 1, 0, 1], secret, [1, 0, 1, 1]]
    assert evaluate_tpr(mixed, secret, tau=3) == 0.5
    with pytest.raises(ValueError):
        evaluate_tpr([], secret, tau=2)


def test_collusion_merge_ratios():
    a = torch.nn.Linear(2, 2, bias=False)
    b = torch.nn.Linear(2, 2, bias=False)
    with torch.no_grad():
        a.weight.fill_(2.0)
        b.weight.fill_(4.0)
    assert torch.equal(collusion_merge(a, b, 1.0).weight, a.weight)
    merged = collusion_merge(a, b, 0.5)
    assert torch.allclose(merged.weight, torch.full((2, 2), 3.0))
    # inputs untouched
    assert torch.allclose(a.weight, torch.full((2, 2), 2.0))


def test_collusion_merge_rejects_mismatch():
    a = torch.nn.Linear(2, 2)
    b = torch.nn.Linear(3, 2)
    with pytest.raises(ValueError):
        collusion_merge(a, b, 0.5)


def test_collusion_bit_table():
    s1 = [0, 0, 1, 1]
    s2 = [0, 1, 0, 1]
    probs = np.array([[0.1, 0.6, 0.4, 0.9], [0.2, 0.4, 0.6, 0.8]])
    report = collusion_bit_table(s1, s2, probs, ratio=0.5)
    assert report.expectations["00"] == 0.0
    assert report.expectations["11"] == 1.0
    assert report.expectations["01"] == 0.5
    assert report.expectations["10"] == 0.5
    with pytest.raises(ValueError):
        collusion_bit_table(s1, s1, probs, ratio=0.5)
    with pytest.raises(ValueError):
        collusion_bit_table(s1, s2, probs[:0], ratio=0.5)


def test_detection_report_invariants():
    report = DetectionReport(
        k=16, tau=15, target_fpr=1e-4, achieved_fpr=fpr(16, 15),
        bit_acc_mean=0.97, tpr=0.96, n_samples=100,
    )
    assert "tpr" in report.to_json()
    with pytest.raises(ValueError):
        DetectionReport(
            k=16, tau=15, target_fpr=1e-6, achieved_fpr=1e-5,
            bit_acc_mean=0.9, tpr=0.9, n_samples=10,
        )


def test_collusion_report_bounds():
    with pytest.raises(ValueError):
        CollusionReport(expectations={"00": 1.2}, merge_ratio=0.5, n_samples=10)
