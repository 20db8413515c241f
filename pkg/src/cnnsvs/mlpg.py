"""Maximum-likelihood parameter generation with a banded Cholesky solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import WindowSet, apply_windows_transpose, default_windows, precision_band


class SolverError(ArithmeticError):
    """A nonpositive pivot was met during banded Cholesky factorization."""

    def __init__(self, index: int, column: int | None = None):
        where = f"index {index}" if column is None else f"frame {index}, dimension {column}"
        super().__init__(f"nonpositive pivot at {where}")
        self.index = index
        self.column = column


def banded_cholesky(ab: np.ndarray) -> np.ndarray:
    """Factor A = L L^T from its lower band ``ab[k, i] = A[i + k, i]``.

    A trailing batch axis is allowed: ``ab`` of shape (bw+1, n, B)
    factors B independent matrices at once.
    """
    ab = np.asarray(ab, dtype=float)
    bw, n = ab.shape[0] - 1, ab.shape[1]
    L = np.zeros_like(ab)
    for j in range(n):
        acc = ab[0, j].copy()
        for m in range(1, min(bw, j) + 1):
            acc -= L[m, j - m] ** 2
        if np.any(~(acc > 0)):
            bad = np.flatnonzero(~(np.atleast_1d(acc) > 0))[0]
            raise SolverError(j, None if ab.ndim == 2 else int(bad))
        L[0, j] = np.sqrt(acc)
        for r in range(1, min(bw, n - 1 - j) + 1):
            v = ab[r, j].copy()
            for m in range(1, min(bw - r, j) + 1):
                v -= L[r + m, j - m] * L[m, j - m]
            L[r, j] = v / L[0, j]
    return L


def cholesky_solve_banded(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    bw, n = L.shape[0] - 1, L.shape[1]
    y = np.array(rhs, dtype=float)
    for j in range(n):
        for m in range(1, min(bw, j) + 1):
            y[j] -= L[m, j - m] * y[j - m]
        y[j] /= L[0, j]
    for j in range(n - 1, -1, -1):
        for m in range(1, min(bw, n - 1 - j) + 1):
            y[j] -= L[m, j] * y[j + m]
        y[j] /= L[0, j]
    return y


def solve_banded_spd(ab: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve A x = rhs for symmetric positive-definite banded A (lower band form)."""
    ab = np.asarray(ab, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != ab.shape[1]:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, matrix has {ab.shape[1]}")
    return cholesky_solve_banded(banded_cholesky(ab), rhs)


@dataclass
class GaussianSequence:
    """Per-frame means and diagonal variances of [static, delta, delta-delta].

    ``variances`` may be a single (K,) row, meaning tied across frames.
    """

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.broadcast_to(np.asarray(self.variances, dtype=float), self.means.shape)
        if np.any(~(self.variances > 0)):
            raise ValueError("variances must be positive")


def generate(seq: GaussianSequence, windows: WindowSet | None = None) -> np.ndarray:
    """Static trajectory c minimizing (mu - W c)^T Sigma^-1 (mu - W c); returns (T, D)."""
    windows = windows or default_windows()
    T, K = seq.means.shape
    if T < 1:
        raise ValueError("empty sequence")
    if K % len(windows):
        raise ValueError(f"{K} mean columns is not a multiple of {len(windows)} windows")
    prec = 1.0 / seq.variances
    ab = precision_band(prec, windows)
    rhs = apply_windows_transpose(prec * seq.means, windows)
    return solve_banded_spd(ab, rhs)
