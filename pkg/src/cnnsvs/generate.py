"""Segment planning, cross-faded assembly and score-to-feature synthesis."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import default_windows
from .mlpg import GaussianSequence, generate as mlpg_generate
from .score import (
    Score,
    StateAlignment,
    build_frame_features,
    denormalize,
    normalize,
)
from .vocoder import AcousticLayout, AcousticSequence

SYNTH_MODES = ("proposed-frame", "proposed-state", "baseline-mlpg")


@dataclass(frozen=True)
class Segment:
    start: int
    end: int  # exclusive; frames [end, start + padded) are padding to discard
    padded: int

    @property
    def length(self) -> int:
        return self.end - self.start

    @property
    def pad(self) -> int:
        return self.padded - self.length


@dataclass(frozen=True)
class SegmentPlan:
    n_frames: int
    seg_len: int
    overlap: int
    segments: tuple[Segment, ...]


def _round_up(n, m):
    return -(-n // m) * m


def plan_segments(T: int, seg_len: int = 2000, overlap: int = 100, multiple: int = 4) -> SegmentPlan:
    """Cut [0, T) into segments of ``seg_len`` frames sharing ``overlap`` frames.

    Only the last segment may be shorter; it is padded up to a multiple of
    ``multiple`` frames.  At most two segments share a frame, so the overlap
    is limited to half a segment.  When the hop ``seg_len - overlap`` is a
    multiple of ``multiple`` every segment keeps the resampling phase of a
    single whole-sequence pass.
    """
    if T <= 0:
        raise ValueError("cannot plan segments for an empty sequence")
    if seg_len % multiple:
        raise ValueError(f"segment length {seg_len} is not a multiple of {multiple}")
    if not 0 <= 2 * overlap <= seg_len:
        raise ValueError(f"overlap must be in [0, {seg_len // 2}], got {overlap}")
    segments = []
    start = 0
    while start + seg_len < T:
        segments.append(Segment(start, start + seg_len, seg_len))
        start += seg_len - overlap
    segments.append(Segment(start, T, _round_up(T - start, multiple)))
    return SegmentPlan(T, seg_len, overlap, tuple(segments))


@dataclass(frozen=True)
class CrossfadePlan:
    plan: SegmentPlan
    weights: tuple[np.ndarray, ...]  # one weight per real frame of each segment

    def frame_weight_sums(self) -> np.ndarray:
        total = np.zeros(self.plan.n_frames)
        for seg, w in zip(self.plan.segments, self.weights):
            total[seg.start:seg.end] += w
        return total


def crossfade_plan(plan: SegmentPlan) -> CrossfadePlan:
    """Linear fades with incoming weight (i + 0.5) / n over each n-frame overlap."""
    segs = plan.segments
    weights = [np.ones(s.length) for s in segs]
    for i in range(len(segs) - 1):
        a, b = segs[i], segs[i + 1]
        n = a.end - b.start
        if n <= 0:
            continue
        ramp = (np.arange(n) + 0.5) / n
        weights[i + 1][:n] = ramp
        weights[i][a.length - n:] = 1.0 - ramp
    return CrossfadePlan(plan, tuple(weights))


def crossfade_assemble(outputs, plan: SegmentPlan | CrossfadePlan) -> np.ndarray:
    """Blend per-segment outputs (padded or trimmed) into one (T, D) sequence."""
    cf = plan if isinstance(plan, CrossfadePlan) else crossfade_plan(plan)
    segs = cf.plan.segments
    if len(outputs) != len(segs):
        raise ValueError(f"{len(outputs)} outputs for {len(segs)} segments")
    D = np.shape(outputs[0])[1]
    out = np.zeros((cf.plan.n_frames, D))
    written = np.zeros(cf.plan.n_frames, dtype=bool)
    for seg, y, w in zip(segs, outputs, cf.weights):
        y = np.asarray(y, dtype=float)
        if y.shape[0] not in (seg.length, seg.padded) or y.shape[1] != D:
            raise ValueError(f"segment output of shape {y.shape} does not match segment {seg}")
        y = y[:seg.length]
        full = w == 1.0
        idx = np.arange(seg.start, seg.end)
        out[idx[full]] = y[full]
        part = ~full
        blend = idx[part]
        out[blend] = np.where(written[blend, None], out[blend], 0.0) + w[part, None] * y[part]
        written[idx] = True
    return out


def pad_rows(x: np.ndarray, n: int) -> np.ndarray:
    """Append ``n`` copies of the last row."""
    return x if n == 0 else np.concatenate([x, np.repeat(x[-1:], n, axis=0)])


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def run_segments(model, ctx: np.ndarray, frame_cols: np.ndarray, plan: SegmentPlan, threads: int = 1):
    """Frame-mode inference: FFNN on every frame of every segment."""
    def one(seg):
        c = pad_rows(ctx[seg.start:seg.end], seg.pad)
        f = pad_rows(frame_cols[seg.start:seg.end], seg.pad)
        return model.forward(c, f)[0][:seg.length]
    return _map(one, plan.segments, threads)


def run_segments_state(model, state_ctx: np.ndarray, durations: np.ndarray, frame_cols: np.ndarray,
                       plan: SegmentPlan, threads: int = 1):
    """State-mode inference: FFNN once per state for the whole song, CNN per segment."""
    hidden, _ = model.run_ffnn(state_ctx)
    hidden = np.repeat(hidden, durations, axis=1).T  # (T, units)

    def one(seg):
        h = pad_rows(hidden[seg.start:seg.end], seg.pad)
        f = pad_rows(frame_cols[seg.start:seg.end], seg.pad)
        return model.run_cnn(model.cnn_input(h.T, f))[0][:seg.length]
    return _map(one, plan.segments, threads)


def threshold_flags(values: np.ndarray, layout: AcousticLayout) -> np.ndarray:
    out = values.copy()
    for i in layout.flag_channels:
        out[:, i] = (out[:, i] > 0.5).astype(float)
    return out


def predict_normalized(bundle, score: Score, align: StateAlignment, mode: str = "proposed-frame",
                       seg_len: int = 2000, overlap: int = 100, threads: int = 1) -> np.ndarray:
    """Model output in normalized units (proposed modes only), before flag thresholding."""
    if mode not in SYNTH_MODES[:2]:
        raise ValueError(f"mode {mode!r} has no normalized segment output")
    if bundle.kind != "proposed":
        raise ValueError(f"checkpoint holds a {bundle.kind} model, mode {mode} needs a proposed model")
    feats = build_frame_features(score, align, bundle.context)
    x = normalize(feats.values, bundle.input_stats)
    n = feats.n_context
    model = bundle.model
    plan = plan_segments(align.n_frames, seg_len, overlap, model.config.length_multiple)
    if mode == "proposed-frame":
        outs = run_segments(model, x[:, :n], x[:, n:], plan, threads)
    else:
        starts = np.array([e.start for e in align.entries], dtype=np.int64)
        state_ctx = x[starts, :n]
        outs = run_segments_state(model, state_ctx, align.durations, x[:, n:], plan, threads)
    return crossfade_assemble(outs, plan)


def synthesize_features(score: Score, align: StateAlignment, bundle, mode: str = "proposed-frame",
                        seg_len: int = 2000, overlap: int = 100, threads: int = 1) -> AcousticSequence:
    """Score + alignment -> denormalized acoustic features with binary flags."""
    if mode not in SYNTH_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {SYNTH_MODES}")
    layout = bundle.layout
    if mode == "baseline-mlpg":
        if bundle.kind != "baseline":
            raise ValueError(f"checkpoint holds a {bundle.kind} model, mode {mode} needs a baseline model")
        feats = build_frame_features(score, align, bundle.context)
        y, _ = bundle.model.forward(normalize(feats.values, bundle.input_stats))
        means = denormalize(y, bundle.dyn_stats)
        statics = mlpg_generate(GaussianSequence(means, bundle.cov.variances), default_windows())
    else:
        y = predict_normalized(bundle, score, align, mode, seg_len, overlap, threads)
        statics = denormalize(y, bundle.output_stats)
    return AcousticSequence(threshold_flags(statics, layout), layout, align.frame_shift)


def baseline_raw_statics(score: Score, align: StateAlignment, bundle) -> np.ndarray:
    """Static part of the baseline's per-frame means, without MLPG (denormalized)."""
    feats = build_frame_features(score, align, bundle.context)
    y, _ = bundle.model.forward(normalize(feats.values, bundle.input_stats))
    return denormalize(y, bundle.dyn_stats)[:, :bundle.layout.dim]
