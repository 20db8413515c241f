"""Small 1-D convolutional network kernels with hand-written backward passes.

Tensors are ``(channels, frames)`` float arrays.  Weight layouts:

* ``conv`` / ``down2``: ``w`` is (C_out, C_in, k), ``b`` is (C_out,)
* ``up2`` (transposed): ``w`` is (C_in, C_out, k), ``b`` is (C_out,)

Stride-1 convolutions are zero-padded to keep the length.  ``down2`` reads
``x[2t + j - k//2]`` and halves the length; ``up2`` is its transpose and
doubles it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


# -- stride-1 convolution -------------------------------------------------

def _cols(xp, k, stride, n_out):
    """(C_in*k, n_out) patch matrix of a padded input."""
    win = sliding_window_view(xp, k, axis=1)[:, ::stride][:, :n_out]  # (C_in, n_out, k)
    return np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(-1, n_out)


def _check(x, w, cin_axis):
    if x.ndim != 2:
        raise ShapeError(f"expected (channels, frames), got shape {x.shape}")
    if x.shape[0] != w.shape[cin_axis]:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {w.shape[cin_axis]}")


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    _check(x, w, 1)
    cout, cin, k = w.shape
    if k % 2 != 1:
        raise ShapeError("same-length convolution needs an odd filter size")
    T = x.shape[1]
    if k == 1:
        y = w[:, :, 0] @ x
    else:
        xp = np.pad(x, ((0, 0), (k // 2, k // 2)))
        y = w.reshape(cout, -1) @ _cols(xp, k, 1, T)
    if b is not None:
        y += b[:, None]
    return y


def _scatter_cols(gcols, cin, k, stride, n_out, length):
    """Adjoint of :func:`_cols`: accumulate patch gradients into a padded signal."""
    g = gcols.reshape(cin, k, n_out)
    gxp = np.zeros((cin, length))
    for j in range(k):
        gxp[:, j:j + stride * (n_out - 1) + 1:stride] += g[:, j]
    return gxp


def conv1d_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    """Return (dx, dw, db) for :func:`conv1d_forward`."""
    cout, cin, k = w.shape
    T = x.shape[1]
    db = gy.sum(axis=1)
    if k == 1:
        return w[:, :, 0].T @ gy, (gy @ x.T)[:, :, None], db
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p)))
    cols = _cols(xp, k, 1, T)
    dw = (gy @ cols.T).reshape(w.shape)
    gxp = _scatter_cols(w.reshape(cout, -1).T @ gy, cin, k, 1, T, T + 2 * p)
    return gxp[:, p:p + T], dw, db


# -- stride-2 down / up sampling -----------------------------------------

def down2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    _check(x, w, 1)
    cout, cin, k = w.shape
    T = x.shape[1]
    if T % 2:
        raise ShapeError(f"down2 needs an even number of frames, got {T}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, k)))
    y = w.reshape(cout, -1) @ _cols(xp, k, 2, T // 2)
    if b is not None:
        y += b[:, None]
    return y


def down2_backward(x, w, gy):
    cout, cin, k = w.shape
    T = x.shape[1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, k)))
    cols = _cols(xp, k, 2, T // 2)
    dw = (gy @ cols.T).reshape(w.shape)
    gxp = _scatter_cols(w.reshape(cout, -1).T @ gy, cin, k, 2, T // 2, T + p + k)
    return gxp[:, p:p + T], dw, gy.sum(axis=1)


def up2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    _check(x, w, 0)
    cin, cout, k = w.shape
    T = x.shape[1]
    p = k // 2
    # each input frame t writes w[:, :, j] * x[t] to output 2t + j - p
    contrib = w.transpose(1, 2, 0).reshape(cout * k, cin) @ x
    yp = _scatter_cols(contrib, cout, k, 2, T, 2 * T + k)
    y = yp[:, p:p + 2 * T]
    if b is not None:
        y = y + b[:, None]
    return y


def up2_backward(x, w, gy):
    cin, cout, k = w.shape
    T = x.shape[1]
    p = k // 2
    gyp = np.pad(gy, ((0, 0), (p, k - p)))
    cols = _cols(gyp, k, 2, T)  # (cout*k, T)
    wm = w.transpose(1, 2, 0).reshape(cout * k, cin)
    dx = wm.T @ cols
    dw = (cols @ x.T).reshape(cout, k, cin).transpose(2, 0, 1)
    return dx, dw, gy.sum(axis=1)


# -- activations ----------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, gy):
    return gy * (x > 0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(y, gy):
    """Gradient given the sigmoid *output* y."""
    return gy * y * (1.0 - y)


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    return (rng.random(shape) >= p) / (1.0 - p)


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None):
    """Return (y, mask); the mask is None in inference mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    mask = dropout_mask(x.shape, p, rng)
    return x * mask, mask


# -- layer specs and sequential stacks -----------------------------------

KINDS = ("conv", "down2", "up2", "relu", "sigmoid", "dropout", "residual")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    cin: int = 0
    cout: int = 0
    k: int = 1
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "residual") and self.k % 2 != 1:
            raise ValueError("same-length convolutions need an odd filter size")
        if self.kind == "residual" and self.cin != self.cout:
            raise ValueError("residual blocks preserve channel count")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {self.p}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "down2", "up2", "residual")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cin": self.cin, "cout": self.cout, "k": self.k, "p": self.p}


def conv(cin, cout, k=1):
    return LayerSpec("conv", cin, cout, k)


def out_length(spec: LayerSpec, T: int) -> int:
    if spec.kind == "down2":
        return T // 2
    if spec.kind == "up2":
        return T * 2
    return T


def layer_macs(spec: LayerSpec, T: int) -> int:
    """Multiply-accumulates of one layer on an input of T frames.

    up2 is a transposed convolution: every input frame is multiplied by the
    full (C_in, C_out, k) kernel, so it is counted on its input length.
    """
    if spec.kind == "conv":
        return spec.cin * spec.cout * spec.k * T
    if spec.kind == "down2":
        return spec.cin * spec.cout * spec.k * (T // 2)
    if spec.kind == "up2":
        return spec.cin * spec.cout * spec.k * T
    if spec.kind == "residual":
        return 2 * spec.cin * spec.cout * spec.k * T
    return 0


def mac_count(layers: Sequence[LayerSpec], T: int) -> int:
    total = 0
    for spec in layers:
        total += layer_macs(spec, T)
        T = out_length(spec, T)
    return total


def _weight_shapes(spec: LayerSpec):
    if spec.kind in ("conv", "down2"):
        return {"w": (spec.cout, spec.cin, spec.k), "b": (spec.cout,)}
    if spec.kind == "up2":
        return {"w": (spec.cin, spec.cout, spec.k), "b": (spec.cout,)}
    if spec.kind == "residual":
        s = (spec.cout, spec.cin, spec.k)
        return {"w1": s, "b1": (spec.cout,), "w2": s, "b2": (spec.cout,)}
    return {}


def _fan(shape):
    return shape[1] * shape[2], shape[0] * shape[2]


@dataclass
class ParameterStore:
    """Named parameter arrays plus Adam moments."""

    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def n_parameters(self) -> int:
        return sum(a.size for a in self.params.values())


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParameterStore, grads: dict, hyper: AdamConfig = AdamConfig()) -> ParameterStore:
    """In-place bias-corrected Adam update of every parameter with a gradient."""
    store.step += 1
    t = store.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        store.params[name] -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return store


class Sequential:
    """A chain of layers whose parameters live in a shared ParameterStore under ``prefix``."""

    def __init__(self, specs: Sequence[LayerSpec], prefix: str):
        self.specs = list(specs)
        self.prefix = prefix

    def key(self, i, name):
        return f"{self.prefix}.{i}.{name}"

    def init(self, store: ParameterStore, rng: np.random.Generator, output_init: str = "xavier") -> None:
        """He-uniform for layers feeding ReLU, Xavier-uniform for the output layer."""
        last = max((i for i, s in enumerate(self.specs) if s.has_params), default=-1)
        for i, spec in enumerate(self.specs):
            for name, shape in _weight_shapes(spec).items():
                if name.startswith("b"):
                    store.add(self.key(i, name), np.zeros(shape))
                    continue
                fan_in, fan_out = _fan(shape)
                if i == last and output_init == "xavier":
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                else:
                    bound = math.sqrt(6.0 / fan_in)
                if spec.kind == "residual" and name == "w2":
                    bound *= 0.5  # keeps deep residual stacks near unit gain at init
                store.add(self.key(i, name), rng.uniform(-bound, bound, size=shape))

    def param_shapes(self) -> dict:
        return {self.key(i, name): shape for i, spec in enumerate(self.specs)
                for name, shape in _weight_shapes(spec).items()}

    def macs(self, T: int) -> int:
        return mac_count(self.specs, T)

    def out_length(self, T: int) -> int:
        for s in self.specs:
            T = out_length(s, T)
        return T

    def forward(self, params: dict, x: np.ndarray, train: bool = False, rng=None):
        """Return (y, tape); the tape feeds :meth:`backward`."""
        tape = []
        for i, spec in enumerate(self.specs):
            k = spec.kind
            if k == "conv":
                y = conv1d_forward(x, params[self.key(i, "w")], params[self.key(i, "b")])
                tape.append(x)
            elif k == "down2":
                y = down2_forward(x, params[self.key(i, "w")], params[self.key(i, "b")])
                tape.append(x)
            elif k == "up2":
                y = up2_forward(x, params[self.key(i, "w")], params[self.key(i, "b")])
                tape.append(x)
            elif k == "relu":
                y = relu(x)
                tape.append(x)
            elif k == "sigmoid":
                y = sigmoid(x)
                tape.append(y)
            elif k == "dropout":
                y, mask = dropout(x, spec.p, train, rng)
                tape.append(mask)
            elif k == "residual":
                h = conv1d_forward(x, params[self.key(i, "w1")], params[self.key(i, "b1")])
                a = relu(h)
                y = x + conv1d_forward(a, params[self.key(i, "w2")], params[self.key(i, "b2")])
                tape.append((x, h, a))
            x = y
        return x, tape

    def backward(self, params: dict, tape: list, gy: np.ndarray):
        """Return (dx, grads) where grads maps parameter names to gradients."""
        grads = {}
        for i in range(len(self.specs) - 1, -1, -1):
            spec, saved = self.specs[i], tape[i]
            k = spec.kind
            if k in ("conv", "down2", "up2"):
                fn = {"conv": conv1d_backward, "down2": down2_backward, "up2": up2_backward}[k]
                gy, dw, db = fn(saved, params[self.key(i, "w")], gy)
                grads[self.key(i, "w")] = dw
                grads[self.key(i, "b")] = db
            elif k == "relu":
                gy = relu_backward(saved, gy)
            elif k == "sigmoid":
                gy = sigmoid_backward(saved, gy)
            elif k == "dropout":
                if saved is not None:
                    gy = gy * saved
            elif k == "residual":
                x, h, a = saved
                ga, dw2, db2 = conv1d_backward(a, params[self.key(i, "w2")], gy)
                gx, dw1, db1 = conv1d_backward(x, params[self.key(i, "w1")], relu_backward(h, ga))
                grads[self.key(i, "w1")], grads[self.key(i, "b1")] = dw1, db1
                grads[self.key(i, "w2")], grads[self.key(i, "b2")] = dw2, db2
                gy = gy + gx
        return gy, grads


def _input_interval(specs: Sequence[LayerSpec], lo: int, hi: int) -> tuple[int, int]:
    """Input frames read by output frames [lo, hi], ignoring sequence edges."""
    for s in reversed(specs):
        p = s.k // 2
        if s.kind == "conv":
            lo, hi = lo - p, hi + p
        elif s.kind == "residual":
            lo, hi = lo - 2 * p, hi + 2 * p
        elif s.kind == "down2":
            lo, hi = 2 * lo - p, 2 * hi - p + s.k - 1
        elif s.kind == "up2":
            # output o is written by input t when o = 2t + j - p for some tap j
            lo, hi = -((s.k - 1 - p - lo) // 2), (hi + p) // 2
    return lo, hi


def receptive_field(specs: Sequence[LayerSpec]) -> int:
    """Widest span of input frames that can affect one output frame."""
    period = 2 ** sum(s.kind == "up2" for s in specs)
    return max(hi - lo + 1 for lo, hi in (_input_interval(specs, o, o) for o in range(period)))
