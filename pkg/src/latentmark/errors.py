"""Shared exception types."""

from __future__ import annotations


class TrainingError(RuntimeError):
    """Raised when a training loop diverges or fails to converge.

    ``last_good`` carries the most recent non-divergent state dict, when one
    exists, so callers can persist a usable checkpoint.
    """

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class MergeError(ValueError):
    """Raised when an adapter references layers the target model lacks."""
