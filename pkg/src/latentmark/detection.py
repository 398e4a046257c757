"""Watermark verification statistics.

The null model treats each extracted bit from unwatermarked content as an
independent fair coin, so the matched-bit count against a fixed k-bit secret
is Binomial(k, 1/2).  The false positive rate of the decision rule
"declare watermarked when matches > tau" is the upper binomial tail, which
also equals the regularized incomplete beta function I_{1/2}(tau+1, k-tau).
Both evaluations are provided: an exact big-integer tail (reference) and a
continued-fraction incomplete beta (fast double precision).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .payload import as_bits


def bit_accuracy(secret, extracted) -> float:
    """Fraction of matching bits between two equal-length bit vectors."""
    a, b = as_bits(secret), as_bits(extracted)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return float((a == b).sum() / len(a))


def match_count(secret, extracted) -> int:
    a, b = as_bits(secret), as_bits(extracted)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return int((a == b).sum())


def fpr_exact(k: int, tau: int) -> Fraction:
    """Exact P(matches > tau) under Binomial(k, 1/2), as a Fraction."""
    _check_tau(k, tau)
    total = sum(math.comb(k, i) for i in range(tau + 1, k + 1))
    return Fraction(total, 1 << k)


def fpr(k: int, tau: int) -> float:
    """False positive rate of the rule "matches > tau" for a k-bit payload."""
    return float(fpr_exact(k, tau))


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-14) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta CF did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) evaluated via continued fractions at double precision."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def fpr_incomplete_beta(k: int, tau: int) -> float:
    """FPR via I_{1/2}(tau+1, k-tau); defined as 0 at tau=k (empty tail)."""
    _check_tau(k, tau)
    if tau == k:
        return 0.0
    return regularized_incomplete_beta(tau + 1.0, float(k - tau), 0.5)


def threshold_for_fpr(k: int, target_fpr: float) -> int:
    """Smallest matched-bit threshold tau with fpr(k, tau) <= target_fpr."""
    if not 0.0 < target_fpr < 1.0:
        raise ValueError(f"target FPR must be in (0, 1), got {target_fpr}")
    target = Fraction(target_fpr)
    for tau in range(k + 1):
        if fpr_exact(k, tau) <= target:
            return tau
    return k  # unreachable: fpr(k, k) == 0


def evaluate_tpr(extraction_results, secret, tau: int) -> float:
    """Fraction of extractions whose matched-bit count strictly exceeds tau."""
    results = list(extraction_results)
    if not results:
        raise ValueError("no extraction results given")
    hits = sum(1 for r in results if match_count(secret, r) > tau)
    return hits / len(results)


def _check_tau(k: int, tau: int) -> None:
    if k < 1:
        raise ValueError(f"payload length must be >= 1, got {k}")
    if not 0 <= tau <= k:
        raise ValueError(f"tau must be in [0, {k}], got {tau}")


@dataclass
class DetectionReport:
    k: int
    tau: int
    target_fpr: float
    achieved_fpr: float
    bit_acc_mean: float
    tpr: float
    n_samples: int
    per_distortion: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.achieved_fpr > self.target_fpr:
            raise ValueError("achieved FPR exceeds the target")
        if not 0 <= self.tau <= self.k:
            raise ValueError("tau outside [0, k]")
        for name, value in (("bit_acc_mean", self.bit_acc_mean), ("tpr", self.tpr)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {
            "k": self.k,
            "tau": self.tau,
            "target_fpr": self.target_fpr,
            "achieved_fpr": self.achieved_fpr,
            "bit_acc_mean": self.bit_acc_mean,
            "tpr": self.tpr,
            "n_samples": self.n_samples,
            "per_distortion": {k: list(v) for k, v in self.per_distortion.items()},
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class CollusionReport:
    """Mean extracted bit value grouped by the two source models' bits."""

    expectations: dict[str, float]  # keys "00", "01", "10", "11"
    merge_ratio: float
    n_samples: int

    def __post_init__(self):
        for key, value in self.expectations.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"expectation[{key}] outside [0, 1]")

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {
            "expectations": self.expectations,
            "merge_ratio": self.merge_ratio,
            "n_samples": self.n_samples,
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def collusion_merge(model_a: torch.nn.Module, model_b: torch.nn.Module, ratio: float):
    """Blend two identical-architecture models layerwise: r*a + (1-r)*b."""
    import copy

    state_a, state_b = model_a.state_dict(), model_b.state_dict()
    if set(state_a) != set(state_b):
        raise ValueError("models have mismatched layers")
    merged = copy.deepcopy(model_a)
    new_state = {}
    for name, wa in state_a.items():
        wb = state_b[name]
        if wa.shape != wb.shape:
            raise ValueError(f"shape mismatch at {name}")
        if wa.dtype.is_floating_point:
            new_state[name] = ratio * wa + (1.0 - ratio) * wb
        else:
            new_state[name] = wa
    merged.load_state_dict(new_state)
    return merged


def collusion_bit_table(secret_a, secret_b, extracted_probs: np.ndarray, ratio: float) -> CollusionReport:
    """Group per-position extracted bit means by (model-a bit, model-b bit)."""
    sa, sb = as_bits(secret_a), as_bits(secret_b)
    if np.array_equal(sa, sb):
        raise ValueError("secrets must differ for a collusion experiment")
    probs = np.asarray(extracted_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != len(sa):
        raise ValueError("extracted_probs must be (n_samples, k)")
    if probs.shape[0] < 1:
        raise ValueError("need at least one sample")
    bits = (probs > 0.5).astype(np.float64)
    table = {}
    for a_bit in (0, 1):
        for b_bit in (0, 1):
            mask = (sa == a_bit) & (sb == b_bit)
            key = f"{a_bit}{b_bit}"
            table[key] = float(bits[:, mask].mean()) if mask.any() else float("nan")
    return CollusionReport(expectations=table, merge_ratio=ratio, n_samples=probs.shape[0])
