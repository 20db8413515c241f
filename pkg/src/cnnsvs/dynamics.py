"""Delta windows and the window matrix W mapping statics to [static, delta, delta-delta].

Sequences are frame-major: ``c`` is ``(T, D)`` and ``o = apply_windows(c)``
is ``(T, n_windows * D)`` with ``o[t] = [c[t], d1 c[t], d2 c[t]]``.
Frames outside ``[0, T)`` are replaced by the nearest edge frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Window:
    coefficients: tuple[float, ...]

    def __post_init__(self):
        if len(self.coefficients) % 2 != 1:
            raise ValueError("window needs an odd number of taps")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("window coefficients must be finite")

    @property
    def halfwidth(self) -> int:
        return len(self.coefficients) // 2

    def taps(self):
        """Yield (offset, coefficient) pairs, skipping zero taps."""
        h = self.halfwidth
        for j, a in enumerate(self.coefficients):
            if a != 0.0:
                yield j - h, a


@dataclass(frozen=True)
class WindowSet:
    windows: tuple[Window, ...]

    def __post_init__(self):
        if not self.windows or self.windows[0].coefficients != (1.0,):
            raise ValueError("window 0 must be the static identity window {0: 1.0}")

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    @property
    def halfwidth(self) -> int:
        return max(w.halfwidth for w in self.windows)


def default_windows() -> WindowSet:
    return WindowSet((Window((1.0,)), Window((-0.5, 0.0, 0.5)), Window((1.0, -2.0, 1.0))))


def static_windows() -> WindowSet:
    return WindowSet((Window((1.0,)),))


def _as_2d(c):
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    if c.ndim != 2:
        raise ValueError(f"expected a (T, D) sequence, got shape {c.shape}")
    return c


def apply_windows(c: np.ndarray, windows: WindowSet | None = None) -> np.ndarray:
    """Stack static and dynamic features: (T, D) -> (T, len(windows) * D)."""
    windows = windows or default_windows()
    c = _as_2d(c)
    T, D = c.shape
    if T == 0:
        raise ValueError("cannot window an empty sequence")
    h = windows.halfwidth
    padded = np.pad(c, ((h, h), (0, 0)), mode="edge")
    out = np.zeros((T, len(windows) * D))
    for w, win in enumerate(windows):
        block = out[:, w * D:(w + 1) * D]
        for off, a in win.taps():
            block += a * padded[h + off:h + off + T]
    return out


def apply_windows_transpose(g: np.ndarray, windows: WindowSet | None = None) -> np.ndarray:
    """Adjoint of :func:`apply_windows`: (T, n_windows * D) -> (T, D)."""
    windows = windows or default_windows()
    g = _as_2d(g)
    T, K = g.shape
    D = K // len(windows)
    if D * len(windows) != K:
        raise ValueError(f"{K} columns is not a multiple of {len(windows)} windows")
    out = np.zeros((T, D))
    t = np.arange(T)
    for w, win in enumerate(windows):
        block = g[:, w * D:(w + 1) * D]
        for off, a in win.taps():
            np.add.at(out, np.clip(t + off, 0, T - 1), a * block)
    return out


@dataclass(frozen=True)
class WindowMatrix:
    """Sparse W of shape (n_windows*D*T, D*T) acting on frame-major vec(c)."""

    T: int
    D: int
    windows: WindowSet
    matrix: sp.csr_matrix

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, vec_c):
        return self.matrix @ vec_c

    @property
    def bandwidth(self) -> int:
        coo = self.matrix.tocoo()
        rows_as_frames = coo.row // (len(self.windows) * self.D)
        cols_as_frames = coo.col // self.D
        return int(np.max(np.abs(rows_as_frames - cols_as_frames), initial=0)) * self.D


def build_window_matrix(T: int, D: int, windows: WindowSet | None = None) -> WindowMatrix:
    windows = windows or default_windows()
    if T < 1:
        raise ValueError("T must be at least 1")
    K = len(windows) * D
    rows, cols, vals = [], [], []
    t = np.arange(T)
    for w, win in enumerate(windows):
        for off, a in win.taps():
            src = np.clip(t + off, 0, T - 1)
            for d in range(D):
                rows.append(t * K + w * D + d)
                cols.append(src * D + d)
                vals.append(np.full(T, a))
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(K * T, D * T))
    return WindowMatrix(T, D, windows, m.tocsr())  # duplicates from edge folding are summed


def precision_band(precisions: np.ndarray, windows: WindowSet | None = None) -> np.ndarray:
    """Lower band of W^T diag(precisions) W for every static dimension.

    ``precisions`` is (T, n_windows * D).  Returns ``ab`` of shape
    (2h + 1, T, D) with ``ab[k, i, d] = A_d[i + k, i]``.
    """
    windows = windows or default_windows()
    lam = _as_2d(precisions)
    T, K = lam.shape
    D = K // len(windows)
    h = windows.halfwidth
    ab = np.zeros((2 * h + 1, T, D))
    t = np.arange(T)
    for w, win in enumerate(windows):
        lw = lam[:, w * D:(w + 1) * D]
        taps = list(win.taps())
        for o1, a1 in taps:
            i = np.clip(t + o1, 0, T - 1)
            for o2, a2 in taps:
                k = np.clip(t + o2, 0, T - 1)
                keep = i >= k
                np.add.at(ab, (i[keep] - k[keep], k[keep]), a1 * a2 * lw[keep])
    return ab
