"""Training loops for the proposed segment model and the FFNN baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Bundle
from .corpus import Corpus, Song
from .dynamics import apply_windows, default_windows
from .generate import baseline_raw_statics, pad_rows, plan_segments, synthesize_features
from .model import AcousticModel, BaselineConfig, BaselineFFNN, ModelConfig, preset_config
from .nn import AdamConfig, adam_step
from .score import FRAME_COLUMN_NAMES, ContextConfig, build_frame_features, denormalize, fit_normalization, normalize
from .trajloss import DEFAULT_FLOOR, ResidualAccumulator, TiedCovariance, nll_with_gradient, update_covariance
from .vocoder import CNN1_CHANNELS

INPUT_RANGE = (0.0, 1.0)
OUTPUT_RANGE = (0.01, 0.99)
TRAIN_SEG_LEN = 400
# Epochs trained with the initial (identity) covariance before the tied
# covariance is re-estimated from each epoch's residuals.
DEFAULT_COV_WARMUP = 30


@dataclass
class SongData:
    inputs: np.ndarray  # (T, n_context + n_frame), normalized
    n_context: int
    starts: np.ndarray  # first frame of every state
    durations: np.ndarray
    target: np.ndarray  # (T, D) normalized statics

    @property
    def n_frames(self) -> int:
        return self.inputs.shape[0]


def fit_stats(songs, context: ContextConfig):
    feats = [build_frame_features(s.score, s.align, context).values for s in songs]
    return (fit_normalization(feats, INPUT_RANGE),
            fit_normalization([s.acoustic.values for s in songs], OUTPUT_RANGE))


def prepare(song: Song, context: ContextConfig, input_stats, output_stats) -> SongData:
    feats = build_frame_features(song.score, song.align, context)
    return SongData(
        normalize(feats.values, input_stats), feats.n_context,
        np.array([e.start for e in song.align.entries], dtype=np.int64), song.align.durations,
        normalize(song.acoustic.values, output_stats))


def segment_states(data: SongData, a: int, b: int):
    """Indices and in-segment durations of the states overlapping frames [a, b)."""
    ends = data.starts + data.durations
    idx = np.flatnonzero((data.starts < b) & (ends > a))
    dur = np.minimum(ends[idx], b) - np.maximum(data.starts[idx], a)
    return idx, dur


def segment_inputs(model: AcousticModel, data: SongData, seg, mode: str):
    n = data.n_context
    x = data.inputs
    frame_cols = pad_rows(x[seg.start:seg.end, n:], seg.pad)
    if mode == "frame":
        return pad_rows(x[seg.start:seg.end, :n], seg.pad), frame_cols, None
    idx, dur = segment_states(data, seg.start, seg.end)
    dur = dur.copy()
    dur[-1] += seg.pad
    return x[data.starts[idx], :n], frame_cols, dur


@dataclass
class TrainResult:
    bundle: Bundle
    metrics: list[dict]


def _bundle(kind, model, context, layout, in_stats, out_stats, cov, dyn_stats=None, frame_shift=0.005):
    return Bundle(kind, model, context, layout, in_stats, out_stats, cov, dyn_stats, frame_shift)


def evaluate_nll(model: AcousticModel, data: list[SongData], cov: TiedCovariance, seg_len: int, mode: str):
    windows = default_windows()
    total, frames = 0.0, 0
    acc = ResidualAccumulator()
    for d in data:
        plan = plan_segments(d.n_frames, seg_len, 0, model.config.length_multiple)
        for seg in plan.segments:
            ctx, fc, dur = segment_inputs(model, d, seg, mode)
            y, _ = model.forward(ctx, fc, dur)
            loss, _, r = nll_with_gradient(y[:seg.length], d.target[seg.start:seg.end], windows, cov)
            total += loss
            frames += seg.length
            acc.add(r)
    return total, frames, acc


def train_proposed(corpus: Corpus, config: ModelConfig | None = None, epochs: int = 30, lr: float = 1e-3,
                   seed: int = 0, seg_len: int = TRAIN_SEG_LEN, cov_warmup: int = DEFAULT_COV_WARMUP,
                   floor: float = DEFAULT_FLOOR, log_fn=None) -> TrainResult:
    """Fit the segment model on the trajectory likelihood.

    Segments are non-overlapping ``seg_len`` chunks of each training song
    (the last one padded), visited in a seeded random song order with one
    Adam step per segment.  The tied covariance starts at identity; after
    every epoch ``e >= cov_warmup`` it is re-estimated from that epoch's
    residuals (``cov_warmup=0`` also re-estimates it from the untrained
    model before the first epoch).  The checkpoint always stores the
    estimate from the final epoch.
    """
    context = corpus.config.context_config()
    train = corpus.train
    in_stats, out_stats = fit_stats(train, context)
    data = [prepare(s, context, in_stats, out_stats) for s in train]
    layout = corpus.config.layout
    if config is None:
        config = preset_config("large", context.width, len(FRAME_COLUMN_NAMES), layout.dim,
                               [layout.index(n) for n in CNN1_CHANNELS])
    if config.n_context != context.width or config.out_dim != layout.dim:
        raise ValueError("model config does not match the corpus feature dimensions")
    mode = config.mode
    model = AcousticModel(config, seed=seed)
    rng = np.random.default_rng([seed, 1])
    windows = default_windows()
    cov = TiedCovariance(np.ones(len(windows) * layout.dim), floor)
    hyper = AdamConfig(lr=lr)

    if cov_warmup < 0:
        raise ValueError("cov_warmup must be non-negative")
    nll0, frames, acc = evaluate_nll(model, data, cov, seg_len, mode)
    metrics = [{"epoch": 0, "nll": nll0, "nll_per_frame": nll0 / frames, "cov": "initial"}]
    if log_fn:
        log_fn(metrics[-1])
    estimated = cov_warmup == 0
    if estimated:
        cov = update_covariance(acc, floor)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(data))
        acc = ResidualAccumulator()
        total = 0.0
        for si in order:
            d = data[si]
            plan = plan_segments(d.n_frames, seg_len, 0, config.length_multiple)
            for seg in plan.segments:
                ctx, fc, dur = segment_inputs(model, d, seg, mode)
                y, tape = model.forward(ctx, fc, dur, train=True, rng=rng)
                loss, g, r = nll_with_gradient(y[:seg.length], d.target[seg.start:seg.end], windows, cov)
                gy = np.zeros_like(y)
                gy[:seg.length] = g
                adam_step(model.store, model.backward(tape, gy), hyper)
                total += loss
                acc.add(r)
        metrics.append({"epoch": epoch, "nll": total, "nll_per_frame": total / acc.count,
                        "cov": "estimated" if estimated else "initial"})
        if log_fn:
            log_fn(metrics[-1])
        if epoch >= cov_warmup or epoch == epochs:
            cov = update_covariance(acc, floor)
            estimated = True
    bundle = _bundle("proposed", model, context, layout, in_stats, out_stats, cov,
                     frame_shift=corpus.config.frame_shift)
    return TrainResult(bundle, metrics)


def train_baseline(corpus: Corpus, config: BaselineConfig | None = None, epochs: int = 30, lr: float = 1e-3,
                   seed: int = 0, batch: int = 256, floor: float = DEFAULT_FLOOR, log_fn=None) -> TrainResult:
    """Frame-wise FFNN on normalized [static, delta, delta-delta] targets with MSE."""
    context = corpus.config.context_config()
    train = corpus.train
    layout = corpus.config.layout
    windows = default_windows()
    in_stats, out_stats = fit_stats(train, context)
    dyn = [apply_windows(s.acoustic.values, windows) for s in train]
    dyn_stats = fit_normalization(dyn, OUTPUT_RANGE)
    X = np.vstack([normalize(build_frame_features(s.score, s.align, context).values, in_stats) for s in train])
    Y = np.vstack([normalize(d, dyn_stats) for d in dyn])
    if config is None:
        config = BaselineConfig(X.shape[1], layout.dim)
    model = BaselineFFNN(config, seed=seed)
    rng = np.random.default_rng([seed, 1])
    hyper = AdamConfig(lr=lr)

    def mse():
        y, _ = model.forward(X)
        return float(np.mean((y - Y) ** 2))

    metrics = [{"epoch": 0, "mse": mse()}]
    if log_fn:
        log_fn(metrics[-1])
    for epoch in range(1, epochs + 1):
        order = rng.permutation(X.shape[0])
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            y, tape = model.forward(X[idx], train=True, rng=rng)
            adam_step(model.store, model.backward(tape, 2.0 * (y - Y[idx]) / y.size), hyper)
        metrics.append({"epoch": epoch, "mse": mse()})
        if log_fn:
            log_fn(metrics[-1])
    # tied variances of the denormalized means, for MLPG
    resid = denormalize(model.forward(X)[0], dyn_stats) - np.vstack(dyn)
    cov = TiedCovariance(np.maximum(np.mean(resid ** 2, axis=0), floor), floor)
    bundle = _bundle("baseline", model, context, layout, in_stats, out_stats, cov, dyn_stats,
                     corpus.config.frame_shift)
    return TrainResult(bundle, metrics)


def evaluate(bundle: Bundle, songs, mode: str = "proposed-frame", seg_len: int = 2000, overlap: int = 100,
             threads: int = 1) -> dict:
    """Held-out RMSE over all static channels and smoothness, in normalized output units.

    Smoothness is the mean squared frame-to-frame delta over the continuous
    channels (binary flags excluded) for the prediction and the oracle.
    """
    se, n, pred_d, ref_d = 0.0, 0, [], []
    cont = list(bundle.layout.smooth_channels)
    for s in songs:
        feats = synthesize_features(s.score, s.align, bundle, mode, seg_len, overlap, threads)
        pred = normalize(feats.values, bundle.output_stats)
        ref = normalize(s.acoustic.values, bundle.output_stats)
        se += float(np.sum((pred - ref) ** 2))
        n += pred.size
        pred_d.append(np.diff(pred[:, cont], axis=0).ravel())
        ref_d.append(np.diff(ref[:, cont], axis=0).ravel())
    return {"rmse": float(np.sqrt(se / n)),
            "msd_pred": float(np.mean(np.concatenate(pred_d) ** 2)),
            "msd_oracle": float(np.mean(np.concatenate(ref_d) ** 2))}


def baseline_smoothness(bundle: Bundle, songs) -> dict:
    """Mean squared delta of the baseline before and after MLPG (normalized units)."""
    raw, smooth = [], []
    for s in songs:
        r = normalize(baseline_raw_statics(s.score, s.align, bundle), bundle.output_stats)
        g = normalize(synthesize_features(s.score, s.align, bundle, "baseline-mlpg").values, bundle.output_stats)
        cont = list(bundle.layout.smooth_channels)
        raw.append(np.diff(r[:, cont], axis=0).ravel())
        smooth.append(np.diff(g[:, cont], axis=0).ravel())
    return {"msd_raw": float(np.mean(np.concatenate(raw) ** 2)),
            "msd_mlpg": float(np.mean(np.concatenate(smooth) ** 2))}
