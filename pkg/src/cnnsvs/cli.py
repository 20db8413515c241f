"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.  The default thread
count comes from ``CNNSVS_THREADS`` (1 when unset).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (
    CorpusConfig,
    FeatureFileError,
    _atomic_bytes,
    align_score,
    generate_corpus,
    load_corpus,
    read_features,
    read_manifest,
    write_features,
)
from .dynamics import default_windows
from .generate import SYNTH_MODES, pad_rows, synthesize_features
from .mlpg import GaussianSequence, SolverError, generate as mlpg_generate
from .model import PRESETS, AcousticModel, ModelConfig, load_config_file, model_macs
from .score import FRAME_COLUMN_NAMES, ScoreError, build_frame_features, parse_alignment, parse_score
from .train import DEFAULT_COV_WARMUP, TRAIN_SEG_LEN, train_baseline, train_proposed
from .vocoder import CNN1_CHANNELS, MLSAConfig, synthesize, write_wav

THREADS_ENV = "CNNSVS_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"expected a positive value, got {text}")
        return v
    return parse


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def config_path(name_or_path: str) -> Path:
    """A shipped preset name (small/medium/large) or a path to a JSON file."""
    if name_or_path in PRESETS:
        return Path(str(resources.files("cnnsvs") / "configs" / f"{name_or_path}.json"))
    p = Path(name_or_path)
    if not p.exists():
        raise UsageError(f"no model config {name_or_path!r} (expected a path or one of {sorted(PRESETS)})")
    return p


def corpus_model_config(corpus_config: CorpusConfig, config: str, mode: str, **fields) -> ModelConfig:
    ctx = corpus_config.context_config()
    layout = corpus_config.layout
    return load_config_file(config_path(config), n_context=ctx.width, n_frame=len(FRAME_COLUMN_NAMES), out_dim=layout.dim,
                            cnn1_outputs=[layout.index(n) for n in CNN1_CHANNELS], mode=mode, **fields)


# -- subcommands ------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = CorpusConfig(seed=args.seed, n_songs=args.songs, n_test=args.test, notes_per_song=args.notes)
    corpus = generate_corpus(cfg, args.out, threads=args.threads)
    frames = sum(s.n_frames for s in corpus.songs)
    print(f"wrote {len(corpus.songs)} songs ({frames} frames) to {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    manifest = read_manifest(args.corpus)
    rows = manifest["songs"]
    for split in ("train", "test"):
        part = [r for r in rows if r["split"] == split]
        f = sum(r["frames"] for r in part)
        s = sum(r["states"] for r in part)
        print(f"{split}\tsongs={len(part)}\tframes={f}\tstates={s}")
    f = sum(r["frames"] for r in rows)
    s = sum(r["states"] for r in rows)
    print(f"total\tsongs={len(rows)}\tframes={f}\tstates={s}\tframes_per_state={f / s:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.model == "proposed":
        config_path(args.config)  # report a bad config name before loading anything
    corpus = load_corpus(args.corpus)
    if not corpus.train:
        raise ValueError(f"corpus {args.corpus} has no training songs")
    lines = []

    def log(m):
        line = json.dumps(m, sort_keys=True)
        lines.append(line)
        if not args.quiet:
            print(line, flush=True)

    if args.model == "baseline":
        result = train_baseline(corpus, epochs=args.epochs, lr=args.lr, seed=args.seed, log_fn=log)
    else:
        cfg = corpus_model_config(corpus.config, args.config, args.mode)
        result = train_proposed(corpus, cfg, epochs=args.epochs, lr=args.lr, seed=args.seed,
                                seg_len=args.seg_len, cov_warmup=args.cov_warmup, log_fn=log)
    save_checkpoint(result.bundle, args.out)
    if args.log:
        _atomic_bytes(Path(args.log), ("\n".join(lines) + "\n").encode())
    return EXIT_OK


def _alignment(args, score, bundle):
    if args.align:
        return parse_alignment(args.align)
    rng = np.random.default_rng([args.seed, 0])
    return align_score(score, rng, bundle.context.n_states, bundle.frame_shift)


def cmd_synth(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    score = parse_score(args.score)
    align = _alignment(args, score, bundle)
    mode = args.mode or ("baseline-mlpg" if bundle.kind == "baseline" else "proposed-frame")
    feats = synthesize_features(score, align, bundle, mode, args.seg_len, args.overlap, args.threads)
    if args.feats:
        write_features(args.feats, feats.values, feats.layout.names, feats.frame_shift, args.sample_rate)
    wav = synthesize(feats, MLSAConfig.for_rate(args.sample_rate, feats.frame_shift), seed=args.seed)
    write_wav(wav, args.sample_rate, args.out)
    print(f"wrote {args.out}: {align.n_frames} frames, {wav.size} samples at {args.sample_rate} Hz")
    return EXIT_OK


def cmd_mlpg_run(args) -> int:
    means = read_features(args.means)
    var = read_features(args.variances)
    if means.values.shape[1] % 3:
        raise ValueError(f"{args.means}: expected 3*D channels (static, delta, delta-delta), "
                         f"got {means.values.shape[1]}")
    v = var.values.astype(float)
    if v.shape[0] == 1:
        v = v[0]
    statics = mlpg_generate(GaussianSequence(means.values.astype(float), v), default_windows())
    D = statics.shape[1]
    write_features(args.out, statics, means.names[:D], means.frame_shift, means.sample_rate)
    print(f"wrote {args.out}: {statics.shape[0]} frames x {D} statics")
    return EXIT_OK


def _infer(model, x: np.ndarray, n: int, align, mode: str) -> None:
    T = x.shape[0]
    pad = -T % model.config.length_multiple
    frame_cols = pad_rows(x[:, n:], pad)
    if mode == "frame":
        model.forward(pad_rows(x[:, :n], pad), frame_cols)
    else:
        starts = np.array([e.start for e in align.entries], dtype=np.int64)
        dur = align.durations.copy()
        dur[-1] += pad
        model.forward(x[starts, :n], frame_cols, dur)


def bench_rows(corpus, configs=("small", "medium", "large"), repeats: int = 1, seed: int = 0) -> list[dict]:
    """MACs, FFNN invocations and wall time of frame vs state inference per config.

    Every song is one segment; MACs are summed per song so padding is counted
    the same way inference performs it.
    """
    songs = corpus.test or corpus.songs
    ctx = corpus.config.context_config()
    feats = [build_frame_features(s.score, s.align, ctx).values for s in songs]
    frames = sum(s.n_frames for s in songs)
    states = sum(s.n_states for s in songs)
    seconds = frames * corpus.config.frame_shift
    rows = []
    for name in configs:
        cfg = corpus_model_config(corpus.config, name, "frame")
        model = AcousticModel(cfg, seed=seed)
        for mode in ("frame", "state"):
            macs = {"ffnn": 0, "cnn": 0, "total": 0}
            for s in songs:
                for k, v in model_macs(cfg, s.n_frames, s.n_states, mode).items():
                    macs[k] += v
            model.ffnn_calls = 0
            t0 = time.perf_counter()
            for _ in range(repeats):
                for s, x in zip(songs, feats):
                    _infer(model, x, ctx.width, s.align, mode)
            wall = (time.perf_counter() - t0) / repeats
            rows.append({"config": name, "mode": mode, "frames": frames, "states": states,
                         "ffnn_macs": macs["ffnn"], "cnn_macs": macs["cnn"], "total_macs": macs["total"],
                         "ffnn_calls": model.ffnn_calls // repeats, "wall_s": wall, "rtf": wall / seconds})
        base = rows[-2]["total_macs"]
        for r in rows[-2:]:
            r["reduction"] = 1.0 - r["total_macs"] / base
    return rows


def format_bench(rows) -> str:
    head = ("config", "mode", "ffnn_macs", "cnn_macs", "total_macs", "reduction", "ffnn_calls", "wall_s", "rtf")
    out = ["\t".join(head)]
    for r in rows:
        out.append("\t".join([r["config"], r["mode"], str(r["ffnn_macs"]), str(r["cnn_macs"]), str(r["total_macs"]),
                              f"{100 * r['reduction']:.1f}%", str(r["ffnn_calls"]), f"{r['wall_s']:.3f}",
                              f"{r['rtf']:.4f}"]))
    return "\n".join(out) + "\n"


def cmd_bench(args) -> int:
    if args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        corpus = generate_corpus(CorpusConfig(seed=args.seed), threads=args.threads)
    rows = bench_rows(corpus, args.configs, args.repeats, args.seed)
    table = format_bench(rows)
    sys.stdout.write(table)
    if args.out:
        _atomic_bytes(Path(args.out), (json.dumps(rows, indent=1) + "\n").encode())
    return EXIT_OK


def cmd_dump_traj(args) -> int:
    ff = read_features(args.features)
    if args.channel not in ff.names:
        raise ValueError(f"{args.features}: no channel {args.channel!r} (have {', '.join(ff.names)})")
    col = ff.values[:, ff.names.index(args.channel)]
    text = "frame\t" + args.channel + "\n" + "".join(f"{t}\t{float(v):.6g}\n" for t, v in enumerate(col))
    if args.out:
        _atomic_bytes(Path(args.out), text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cnnsvs", description="Segment-level CNN singing voice synthesis toolkit.")
    p.add_argument("--threads", type=_positive(int), default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0, help="corpus seed (default 0)")
    g.add_argument("--songs", type=_positive(int), default=CorpusConfig.n_songs, help="number of songs (default 48)")
    g.add_argument("--test", type=_nonneg_int, default=CorpusConfig.n_test, help="held-out songs (default 4)")
    g.add_argument("--notes", type=_positive(int), default=CorpusConfig.notes_per_song,
                   help="notes per song (default 24)")
    g.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("stats", help="print corpus frame/state totals")
    s.add_argument("--corpus", required=True)
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", help="train a proposed or baseline model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--model", choices=("proposed", "baseline"), default="proposed", help="default: proposed")
    t.add_argument("--config", default="large", help="preset name or JSON file (default: large)")
    t.add_argument("--mode", choices=("frame", "state"), default="frame", help="FFNN driving mode (default frame)")
    t.add_argument("--epochs", type=_nonneg_int, default=30, help="default 30")
    t.add_argument("--lr", type=_positive(float), default=1e-3, help="Adam learning rate (default 1e-3)")
    t.add_argument("--seed", type=int, default=0, help="default 0")
    t.add_argument("--seg-len", type=_positive(int), default=TRAIN_SEG_LEN,
                   help=f"training segment length in frames (default {TRAIN_SEG_LEN})")
    t.add_argument("--cov-warmup", type=_nonneg_int, default=DEFAULT_COV_WARMUP,
                   help=f"epochs before the tied covariance is first re-estimated (default {DEFAULT_COV_WARMUP})")
    t.add_argument("--log", help="write the per-epoch metrics (JSON lines) here")
    t.add_argument("--quiet", action="store_true", help="do not echo metrics")
    t.set_defaults(func=cmd_train)

    y = sub.add_parser("synth", help="score (+ alignment) -> features and WAV")
    y.add_argument("--checkpoint", required=True)
    y.add_argument("--score", required=True)
    y.add_argument("--align", help="state alignment file (default: synthetic aligner)")
    y.add_argument("--out", required=True, help="output WAV path")
    y.add_argument("--feats", help="also write the acoustic features here")
    y.add_argument("--mode", choices=SYNTH_MODES, help="default: by checkpoint kind")
    y.add_argument("--sample-rate", type=int, choices=(16000, 48000), default=16000, help="default 16000")
    y.add_argument("--seg-len", type=_positive(int), default=2000, help="segment length (default 2000)")
    y.add_argument("--overlap", type=_nonneg_int, default=100, help="cross-faded frames (default 100)")
    y.add_argument("--seed", type=int, default=0, help="aligner and noise seed (default 0)")
    y.set_defaults(func=cmd_synth)

    m = sub.add_parser("mlpg-run", help="MLPG over a feature file of static/delta/delta-delta means")
    m.add_argument("--means", required=True, help="feature file with T x 3D means")
    m.add_argument("--variances", required=True, help="feature file with 1 x 3D or T x 3D variances")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mlpg_run)

    b = sub.add_parser("bench", help="MACs and wall time, frame vs state mode")
    b.add_argument("--corpus", help="corpus directory (default: generate the default corpus in memory)")
    b.add_argument("--configs", nargs="+", default=["small", "medium", "large"], help="presets or JSON files")
    b.add_argument("--repeats", type=_positive(int), default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="write the rows as JSON here")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("dump-traj", help="two-column frame/value dump of one channel")
    d.add_argument("--features", required=True)
    d.add_argument("--channel", default="mcep0", help="default mcep0")
    d.add_argument("--out", help="output path (default stdout)")
    d.set_defaults(func=cmd_dump_traj)
    return p


RUNTIME_ERRORS = (OSError, ValueError, ArithmeticError, KeyError, CheckpointError, FeatureFileError,
                  ScoreError, SolverError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is None:
            args.threads = default_threads()
        return args.func(args)
    except UsageError as e:
        print(f"cnnsvs: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as e:
        print(f"cnnsvs {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
