"""Acoustic model architectures.

* :class:`AcousticModel` -- frame-wise FFNN (1x1 convolutions) followed by a
  fully convolutional segment network.  The FFNN sees the state-level
  context columns; its output is concatenated with the frame-level columns
  (note logF0 and positions) before the CNN.  In frame mode the FFNN is run
  on every frame, in state mode once per alignment state and then repeated.
  The CNN is optionally split into a small CNN1 for editable channels and
  CNN2 for the rest, both reading the same FFNN output.
* :class:`BaselineFFNN` -- conventional frame-wise network predicting
  static + delta + delta-delta means for MLPG.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nn import LayerSpec, ParameterStore, Sequential, conv, mac_count, receptive_field as _rf

MODES = ("frame", "state")


@dataclass(frozen=True)
class ModelConfig:
    n_context: int
    n_frame: int
    out_dim: int
    ffnn_units: tuple[int, ...] = (64, 64, 64)
    dropout: float = 0.2
    cnn_channels: int = 64
    res_blocks: int = 9
    filter_size: int = 3
    n_resample: int = 2
    cnn1_outputs: tuple[int, ...] = ()
    cnn1_channels: int = 16
    cnn1_res_blocks: int = 9
    mode: str = "frame"

    def __post_init__(self):
        object.__setattr__(self, "ffnn_units", tuple(self.ffnn_units))
        object.__setattr__(self, "cnn1_outputs", tuple(self.cnn1_outputs))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.ffnn_units:
            raise ValueError("the first part needs at least one layer")
        if self.filter_size % 2 != 1:
            raise ValueError("filter size must be odd")
        if len(set(self.cnn1_outputs)) != len(self.cnn1_outputs) or any(
                not 0 <= i < self.out_dim for i in self.cnn1_outputs):
            raise ValueError("CNN1 outputs must be distinct output channels")
        if len(self.cnn1_outputs) == self.out_dim:
            raise ValueError("CNN2 would have no outputs")

    @property
    def split(self) -> bool:
        return bool(self.cnn1_outputs)

    @property
    def cnn2_outputs(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.out_dim) if i not in self.cnn1_outputs)

    @property
    def length_multiple(self) -> int:
        return 2 ** self.n_resample

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ffnn_units"] = list(self.ffnn_units)
        d["cnn1_outputs"] = list(self.cnn1_outputs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Architecture sizes only; input/output widths come from the corpus.
PRESETS = {
    "small": dict(ffnn_units=(64, 64, 64), cnn_channels=16, res_blocks=5, split=False),
    "medium": dict(ffnn_units=(64, 64, 64), cnn_channels=32, res_blocks=9, split=True),
    "large": dict(ffnn_units=(64, 64, 64), cnn_channels=64, res_blocks=9, split=True),
}


def preset_config(name: str, n_context: int, n_frame: int, out_dim: int,
                  cnn1_outputs=(), mode: str = "frame", **overrides) -> ModelConfig:
    p = dict(PRESETS[name])
    split = p.pop("split")
    p.update(overrides)
    return ModelConfig(n_context, n_frame, out_dim, cnn1_outputs=tuple(cnn1_outputs) if split else (),
                       mode=mode, **p)


def load_config_file(path, **fields) -> ModelConfig:
    """Read a JSON architecture file; ``fields`` fill in or override entries."""
    d = json.loads(Path(path).read_text())
    if "preset" in d:
        base = dict(PRESETS[d.pop("preset")])
        split = base.pop("split")
        base.update(d)
        d = base
        if not split:
            fields["cnn1_outputs"] = ()
    d.update(fields)
    return ModelConfig.from_dict(d)


def ffnn_specs(n_in: int, units, dropout: float) -> list[LayerSpec]:
    specs, prev = [], n_in
    for u in units:
        specs += [conv(prev, u), LayerSpec("relu")]
        if dropout > 0:
            specs.append(LayerSpec("dropout", p=dropout))
        prev = u
    return specs


def cnn_specs(cin: int, channels: int, res_blocks: int, cout: int, k: int = 3, n_resample: int = 2) -> list[LayerSpec]:
    specs, prev = [], cin
    for _ in range(n_resample):
        specs += [LayerSpec("down2", prev, channels, k), LayerSpec("relu")]
        prev = channels
    specs += [LayerSpec("residual", channels, channels, k) for _ in range(res_blocks)]
    for _ in range(n_resample - 1):
        specs += [LayerSpec("up2", channels, channels, k), LayerSpec("relu")]
    # the last up-sampling layer is the output layer
    specs += [LayerSpec("up2", channels, cout, k), LayerSpec("sigmoid")]
    return specs


def _cnn_stacks(config: ModelConfig) -> list[tuple[Sequential, tuple[int, ...]]]:
    cin = config.ffnn_units[-1] + config.n_frame
    k, r = config.filter_size, config.n_resample
    if not config.split:
        return [(Sequential(cnn_specs(cin, config.cnn_channels, config.res_blocks, config.out_dim, k, r), "cnn"),
                 tuple(range(config.out_dim)))]
    return [
        (Sequential(cnn_specs(cin, config.cnn1_channels, config.cnn1_res_blocks, len(config.cnn1_outputs), k, r),
                    "cnn1"), config.cnn1_outputs),
        (Sequential(cnn_specs(cin, config.cnn_channels, config.res_blocks, len(config.cnn2_outputs), k, r),
                    "cnn2"), config.cnn2_outputs),
    ]


def receptive_field(config: ModelConfig) -> int:
    return max(_rf(stack.specs) for stack, _ in _cnn_stacks(config))


def state_spans(durations: np.ndarray) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(durations)])


def model_macs(config: ModelConfig, n_frames: int, n_states: int, mode: str | None = None) -> dict:
    """Analytic MACs of one pass: FFNN on frames or states, CNN on the frames."""
    mode = mode or config.mode
    ffnn = mac_count(ffnn_specs(config.n_context, config.ffnn_units, config.dropout),
                     n_frames if mode == "frame" else n_states)
    m = config.length_multiple
    T = -(-n_frames // m) * m
    cnn = sum(stack.macs(T) for stack, _ in _cnn_stacks(config))
    return {"ffnn": ffnn, "cnn": cnn, "total": ffnn + cnn}


class AcousticModel:
    def __init__(self, config: ModelConfig, store: ParameterStore | None = None, seed: int = 0):
        self.config = config
        self.ffnn = Sequential(ffnn_specs(config.n_context, config.ffnn_units, config.dropout), "ffnn")
        self.stacks = _cnn_stacks(config)
        self.ffnn_calls = 0
        if store is None:
            store = ParameterStore()
            rng = np.random.default_rng(seed)
            self.ffnn.init(store, rng, output_init="he")
            for stack, _ in self.stacks:
                stack.init(store, rng)
        self.store = store

    @property
    def params(self) -> dict:
        return self.store.params

    # -- pieces ----------------------------------------------------------

    def run_ffnn(self, ctx: np.ndarray, train: bool = False, rng=None):
        """Map context rows (N, n_context) -> (units, N); counts N invocations."""
        ctx = np.asarray(ctx, dtype=float)
        if ctx.ndim != 2 or ctx.shape[1] != self.config.n_context:
            raise ValueError(f"expected (N, {self.config.n_context}) context rows, got {ctx.shape}")
        self.ffnn_calls += ctx.shape[0]
        return self.ffnn.forward(self.params, ctx.T, train, rng)

    def cnn_input(self, hidden: np.ndarray, frame_cols: np.ndarray) -> np.ndarray:
        frame_cols = np.asarray(frame_cols, dtype=float)
        if frame_cols.shape != (hidden.shape[1], self.config.n_frame):
            raise ValueError(f"expected ({hidden.shape[1]}, {self.config.n_frame}) frame columns, got {frame_cols.shape}")
        return np.vstack([hidden, frame_cols.T])

    def run_cnn(self, g_in: np.ndarray, train: bool = False, rng=None):
        """(C, T) -> (T, D) statics in normalized units."""
        T = g_in.shape[1]
        if T % self.config.length_multiple:
            raise ValueError(f"segment length {T} is not a multiple of {self.config.length_multiple}")
        out = np.empty((T, self.config.out_dim))
        tapes = []
        for stack, channels in self.stacks:
            y, tape = stack.forward(self.params, g_in, train, rng)
            out[:, channels] = y.T
            tapes.append(tape)
        return out, tapes

    def backward_cnn(self, tapes, gy: np.ndarray):
        g_in, grads = None, {}
        for (stack, channels), tape in zip(self.stacks, tapes):
            gx, g = stack.backward(self.params, tape, np.ascontiguousarray(gy[:, channels].T))
            grads.update(g)
            g_in = gx if g_in is None else g_in + gx
        return g_in, grads

    # -- full passes -----------------------------------------------------

    def forward(self, ctx, frame_cols, durations=None, train=False, rng=None):
        """Forward over one segment.

        ``ctx`` rows are frames when ``durations`` is None (frame mode) and
        states otherwise (state mode; ``durations`` gives each state's frames
        inside the segment).  Returns ((T, D) output, tape).
        """
        hidden, f_tape = self.run_ffnn(ctx, train, rng)
        if durations is not None:
            durations = np.asarray(durations, dtype=np.int64)
            if durations.shape[0] != hidden.shape[1]:
                raise ValueError(f"{durations.shape[0]} durations for {hidden.shape[1]} states")
            hidden = np.repeat(hidden, durations, axis=1)
        g_in = self.cnn_input(hidden, frame_cols)
        out, c_tapes = self.run_cnn(g_in, train, rng)
        return out, (f_tape, c_tapes, durations)

    def backward(self, tape, gy: np.ndarray) -> dict:
        f_tape, c_tapes, durations = tape
        g_in, grads = self.backward_cnn(c_tapes, gy)
        gh = g_in[:self.config.ffnn_units[-1]]
        if durations is not None:
            gh = np.add.reduceat(gh, state_spans(durations)[:-1], axis=1)
        _, g = self.ffnn.backward(self.params, f_tape, gh)
        grads.update(g)
        return grads

    def forward_frame_mode(self, features) -> np.ndarray:
        """Inference over a whole frame-feature matrix treated as one segment."""
        values = getattr(features, "values", features)
        n = self.config.n_context
        return self.forward(values[:, :n], values[:, n:])[0]

    def forward_state_mode(self, state_features, durations, frame_cols) -> np.ndarray:
        """Inference with the FFNN driven once per state."""
        durations = getattr(durations, "durations", durations)
        return self.forward(state_features, frame_cols, durations)[0]

    def macs(self, n_frames: int, n_states: int, mode: str | None = None) -> dict:
        return model_macs(self.config, n_frames, n_states, mode)


@dataclass(frozen=True)
class BaselineConfig:
    n_in: int
    out_dim: int  # static dimension D; the network emits 3D
    units: tuple[int, ...] = (128, 128, 128)
    dropout: float = 0.2
    n_windows: int = 3

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["units"] = list(self.units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        return cls(**d)


class BaselineFFNN:
    def __init__(self, config: BaselineConfig, store: ParameterStore | None = None, seed: int = 0):
        self.config = config
        specs = ffnn_specs(config.n_in, config.units, config.dropout)
        specs += [conv(config.units[-1], config.n_windows * config.out_dim), LayerSpec("sigmoid")]
        self.net = Sequential(specs, "baseline")
        if store is None:
            store = ParameterStore()
            self.net.init(store, np.random.default_rng(seed))
        self.store = store

    @property
    def params(self) -> dict:
        return self.store.params

    def forward(self, features, train: bool = False, rng=None):
        """(T, n_in) -> ((T, 3D) normalized means, tape)."""
        x = np.asarray(getattr(features, "values", features), dtype=float)
        if x.ndim != 2 or x.shape[1] != self.config.n_in:
            raise ValueError(f"expected (T, {self.config.n_in}) features, got {x.shape}")
        y, tape = self.net.forward(self.params, x.T, train, rng)
        return y.T, tape

    def backward(self, tape, gy: np.ndarray) -> dict:
        return self.net.backward(self.params, tape, np.ascontiguousarray(gy.T))[1]

    def macs(self, n_frames: int) -> int:
        return self.net.macs(n_frames)
