"""Trajectory likelihood of windowed statics under a globally tied diagonal covariance.

The loss is summed over frames:

    L = 1/2 (Wc_ref - Wc)^T Sigma^-1 (Wc_ref - Wc) + T/2 * sum_k log(2 pi var_k)

with one variance per static/delta/delta-delta dimension shared by all frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import WindowSet, apply_windows, apply_windows_transpose, default_windows

DEFAULT_FLOOR = 1e-6


@dataclass
class TiedCovariance:
    variances: np.ndarray
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        self.variances = np.asarray(self.variances, dtype=float).ravel()
        if not self.floor > 0:
            raise ValueError("variance floor must be positive")
        if np.any(~np.isfinite(self.variances)) or np.any(self.variances < self.floor):
            raise ValueError("variances must be finite and not below the floor")

    @classmethod
    def identity(cls, n: int, floor: float = DEFAULT_FLOOR) -> "TiedCovariance":
        return cls(np.ones(n), floor)


def _residual(c_pred, c_ref, windows, cov):
    c_pred = np.asarray(c_pred, dtype=float)
    c_ref = np.asarray(c_ref, dtype=float)
    if c_pred.shape != c_ref.shape or c_pred.ndim != 2:
        raise ValueError(f"shape mismatch: {c_pred.shape} vs {c_ref.shape}")
    if cov.variances.size != len(windows) * c_pred.shape[1]:
        raise ValueError(f"covariance has {cov.variances.size} entries, expected {len(windows) * c_pred.shape[1]}")
    return apply_windows(c_ref, windows) - apply_windows(c_pred, windows)


def nll(c_pred: np.ndarray, c_ref: np.ndarray, windows: WindowSet | None = None,
        cov: TiedCovariance | None = None) -> float:
    windows = windows or default_windows()
    if cov is None:
        cov = TiedCovariance.identity(len(windows) * np.shape(c_pred)[1])
    r = _residual(c_pred, c_ref, windows, cov)
    T = r.shape[0]
    quad = 0.5 * float(np.sum(r * r / cov.variances))
    return quad + 0.5 * T * float(np.sum(np.log(2 * np.pi * cov.variances)))


def nll_gradient(c_pred: np.ndarray, c_ref: np.ndarray, windows: WindowSet | None = None,
                 cov: TiedCovariance | None = None) -> np.ndarray:
    """dL/dc_pred = -W^T Sigma^-1 (Wc_ref - Wc_pred), shape (T, D)."""
    return nll_with_gradient(c_pred, c_ref, windows, cov)[1]


def nll_with_gradient(c_pred, c_ref, windows=None, cov=None):
    """Return (loss, gradient, windowed residual)."""
    windows = windows or default_windows()
    if cov is None:
        cov = TiedCovariance.identity(len(windows) * np.shape(c_pred)[1])
    r = _residual(c_pred, c_ref, windows, cov)
    T = r.shape[0]
    wr = r / cov.variances
    loss = 0.5 * float(np.sum(r * wr)) + 0.5 * T * float(np.sum(np.log(2 * np.pi * cov.variances)))
    return loss, -apply_windows_transpose(wr, windows), r


@dataclass
class ResidualAccumulator:
    """Running sum of squared windowed residuals; merging is order independent."""

    sum_sq: np.ndarray | None = None
    count: int = 0

    def add(self, residual: np.ndarray) -> None:
        residual = np.atleast_2d(residual)
        s = np.sum(residual * residual, axis=0)
        self.sum_sq = s if self.sum_sq is None else self.sum_sq + s
        self.count += residual.shape[0]

    def merge(self, other: "ResidualAccumulator") -> "ResidualAccumulator":
        if other.sum_sq is None:
            return ResidualAccumulator(self.sum_sq, self.count)
        if self.sum_sq is None:
            return ResidualAccumulator(other.sum_sq, other.count)
        return ResidualAccumulator(self.sum_sq + other.sum_sq, self.count + other.count)


def update_covariance(acc: ResidualAccumulator, floor: float = DEFAULT_FLOOR) -> TiedCovariance:
    """ML re-estimate: per-dimension mean squared residual, clamped at ``floor``."""
    if acc.count == 0 or acc.sum_sq is None:
        raise ValueError("no frames accumulated")
    return TiedCovariance(np.maximum(acc.sum_sq / acc.count, floor), floor)
