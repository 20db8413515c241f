"""Deterministic synthetic singing corpus.

Generative rules for the ground-truth acoustic features of a song, given
its score and state alignment (``L`` is ``smoothing`` frames, ``box`` an
L-frame moving average with edge replication):

* mcep: each phoneme has a fixed template drawn from
  ``default_rng([template_seed, inventory index])``: c0 is -4 for ``sil``,
  U(1, 2) for vowels and U(-1, 0.5) for consonants; c(m), m >= 1, is
  N(0, (0.6/m)^2).  mcep = box(template of the phoneme at each frame).
* lf0: box(note logF0 track with rests interpolated).
* vuv: 1 on frames of voiced phonemes, else 0.
* ap band k of K: voiced 0.05 + 0.4 k / (K-1), unvoiced consonant 0.85,
  ``sil`` 0.95; then box.
* vibrato region: states 3..S of a note's last phoneme when it is a vowel
  and the note spans at least ``vibrato_min_frames`` frames.  vib_flag is
  the region; vib_amp = box(A on the region, 0 elsewhere) with
  A = min(60, 20 + 0.1 * note frames) cents; vib_freq = box(f on the
  region, 5.5 elsewhere) with f = clip(5 + (pitch - 60) / 24, 4.5, 6.5) Hz.

Because of the moving average, no smoothed channel jumps by more than its
value range divided by ``smoothing`` between adjacent frames.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .score import (
    SILENCE,
    ContextConfig,
    Note,
    Score,
    StateAlignment,
    alignment_from_durations,
    format_alignment,
    format_score,
    note_logf0_track,
    parse_alignment,
    parse_score,
    score_phonemes,
)
from .vocoder import AcousticLayout, AcousticSequence

VOWELS = ("a", "i", "u", "e", "o")
CONSONANTS = ("k", "s", "t", "n", "m", "h", "r", "g", "d", "y")
UNVOICED = frozenset({"k", "s", "t", "h", SILENCE})
MASTER_INVENTORY = (SILENCE,) + VOWELS + CONSONANTS
MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)
VIBRATO_FREQ_DEFAULT = 5.5


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    n_songs: int = 48
    n_test: int = 4
    notes_per_song: int = 24
    n_phonemes: int = 11  # sil + 5 vowels + consonants
    tempo_range: tuple[float, float] = (120.0, 150.0)
    n_states: int = 5
    frame_shift: float = 0.005
    n_mcep: int = 20
    n_ap: int = 5
    smoothing: int = 15
    template_seed: int = 7
    vibrato_min_frames: int = 120
    rest_probability: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "tempo_range", tuple(self.tempo_range))
        if not 6 <= self.n_phonemes <= len(MASTER_INVENTORY):
            raise ValueError(f"n_phonemes must be in 6..{len(MASTER_INVENTORY)}")
        if not 0 <= self.n_test < self.n_songs:
            raise ValueError("need at least one training song")
        if self.smoothing < 1:
            raise ValueError("smoothing must be at least one frame")

    @property
    def inventory(self) -> tuple[str, ...]:
        return MASTER_INVENTORY[:self.n_phonemes]

    @property
    def consonants(self) -> tuple[str, ...]:
        return tuple(p for p in self.inventory if p in CONSONANTS)

    @property
    def layout(self) -> AcousticLayout:
        return AcousticLayout(self.n_mcep, self.n_ap)

    def context_config(self) -> ContextConfig:
        return ContextConfig(self.inventory, self.n_states)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tempo_range"] = list(self.tempo_range)
        return d


# -- scores and alignments -------------------------------------------------

def generate_score(rng: np.random.Generator, config: CorpusConfig) -> Score:
    key = int(rng.integers(12))
    tempo = float(np.round(rng.uniform(*config.tempo_range)))
    pitches = [57 + key % 12 + d + 12 * o for o in (0, 1) for d in MAJOR_SCALE]
    pitches = [p for p in pitches if 55 <= p <= 79]
    degree = int(rng.integers(len(pitches)))
    notes = [Note(None, 0.5)]
    for i in range(config.notes_per_song):
        if 0 < i < config.notes_per_song - 1 and notes[-1].pitch is not None and rng.random() < config.rest_probability:
            notes.append(Note(None, float(rng.choice([0.5, 1.0]))))
            continue
        degree = int(np.clip(degree + rng.integers(-2, 3), 0, len(pitches) - 1))
        beats = float(rng.choice([0.5, 0.5, 1.0, 1.0, 1.5, 2.0]))
        vowel = str(rng.choice(VOWELS))
        if config.consonants and rng.random() < 0.6:
            lyric = (str(rng.choice(config.consonants)), vowel)
        else:
            lyric = (vowel,)
        notes.append(Note(pitches[degree], beats, lyric))
    notes.append(Note(None, 0.5))
    return Score(tuple(notes), tempo=tempo, key=key)


def split_states(n_frames: int, n_states: int, rng: np.random.Generator) -> list[int]:
    """Split a phoneme into left-to-right states, each at least one frame."""
    weights = rng.lognormal(0.0, 0.3, n_states)
    extra = (n_frames - n_states) * weights / weights.sum()
    base = np.floor(extra).astype(int)
    remainder = n_frames - n_states - base.sum()
    order = np.argsort(-(extra - base), kind="stable")
    base[order[:remainder]] += 1
    return [int(d) + 1 for d in base]


def align_score(score: Score, rng: np.random.Generator, n_states: int = 5, frame_shift: float = 0.005) -> StateAlignment:
    """Synthetic Viterbi path: note spans from the tempo, log-normal phoneme and state durations."""
    cum = np.cumsum([0.0] + [n.beats for n in score.notes])
    bounds = np.round(cum * 60.0 / score.tempo / frame_shift).astype(int)
    durations = []
    for i, note in enumerate(score.notes):
        n_f = int(bounds[i + 1] - bounds[i])
        phones = (SILENCE,) if note.is_rest else note.phonemes
        if n_f < n_states * len(phones):
            raise ValueError(f"note {i} is too short for {len(phones)} phonemes")
        spans = []
        left = n_f
        for j in range(len(phones) - 1):
            d = int(round(rng.lognormal(math.log(12.0), 0.3)))
            d = int(np.clip(d, n_states, left - n_states * (len(phones) - 1 - j)))
            spans.append(d)
            left -= d
        spans.append(left)
        durations += [split_states(d, n_states, rng) for d in spans]
    return alignment_from_durations(durations, frame_shift)


# -- oracle features ---------------------------------------------------------

def phoneme_template(symbol: str, n_mcep: int, template_seed: int = 7) -> np.ndarray:
    rng = np.random.default_rng([template_seed, MASTER_INVENTORY.index(symbol)])
    c = rng.normal(0.0, 1.0, n_mcep) * (0.6 / np.maximum(np.arange(n_mcep), 1))
    if symbol == SILENCE:
        c[0] = -4.0
    elif symbol in VOWELS:
        c[0] = rng.uniform(1.0, 2.0)
    else:
        c[0] = rng.uniform(-1.0, 0.5)
    return c


def moving_average(x: np.ndarray, width: int) -> np.ndarray:
    """Centered ``width``-frame mean along axis 0 with edge replication."""
    x = np.asarray(x, dtype=float)
    if width <= 1:
        return x.copy()
    left = (width - 1) // 2
    padded = np.pad(x, [(left, width - 1 - left)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    return sliding_window_view(padded, width, axis=0).mean(axis=-1)


def vibrato_targets(score: Score, align: StateAlignment, config: CorpusConfig):
    """Unsmoothed (flag, amplitude, frequency) frame targets."""
    T = align.n_frames
    flag = np.zeros(T)
    amp = np.zeros(T)
    freq = np.full(T, VIBRATO_FREQ_DEFAULT)
    slots = score_phonemes(score)
    spans = align.phoneme_spans()
    note_frames = np.zeros(len(score.notes), dtype=int)
    for slot, (a, b) in zip(slots, spans):
        note_frames[slot.note] += b - a
    S = align.n_states
    for p, slot in enumerate(slots):
        note = score.notes[slot.note]
        if note.is_rest or slot.position != slot.count - 1 or slot.symbol not in VOWELS:
            continue
        if note_frames[slot.note] < config.vibrato_min_frames:
            continue
        start = align.entries[p * S + 2].start if S >= 3 else align.entries[p * S].start
        end = spans[p][1]
        flag[start:end] = 1.0
        amp[start:end] = min(60.0, 20.0 + 0.1 * note_frames[slot.note])
        freq[start:end] = float(np.clip(5.0 + (note.pitch - 60) / 24.0, 4.5, 6.5))
    return flag, amp, freq


def oracle_features(score: Score, align: StateAlignment, config: CorpusConfig) -> AcousticSequence:
    layout = config.layout
    slots = score_phonemes(score)
    T = align.n_frames
    L = config.smoothing
    mcep_t = np.zeros((T, layout.n_mcep))
    vuv = np.zeros(T)
    ap_t = np.zeros((T, layout.n_ap))
    k = np.arange(layout.n_ap)
    voiced_ap = 0.05 + 0.4 * k / max(layout.n_ap - 1, 1)
    for slot, (a, b) in zip(slots, align.phoneme_spans()):
        mcep_t[a:b] = phoneme_template(slot.symbol, layout.n_mcep, config.template_seed)
        voiced = slot.symbol not in UNVOICED
        vuv[a:b] = float(voiced)
        ap_t[a:b] = voiced_ap if voiced else (0.95 if slot.symbol == SILENCE else 0.85)
    flag, amp, freq = vibrato_targets(score, align, config)
    values = np.hstack([
        moving_average(mcep_t, L),
        moving_average(note_logf0_track(score, align), L)[:, None],
        vuv[:, None],
        moving_average(ap_t, L),
        moving_average(amp, L)[:, None],
        moving_average(freq, L)[:, None],
        flag[:, None],
    ])
    return AcousticSequence(values, layout, config.frame_shift)


# -- feature files -------------------------------------------------------------

FEATURE_MAGIC = b"SVSF"
FEATURE_VERSION = 1


class FeatureFileError(ValueError):
    pass


@dataclass
class FeatureFile:
    values: np.ndarray  # (frames, channels) float32
    names: tuple[str, ...]
    frame_shift: float = 0.005
    sample_rate: int = 0

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _atomic_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_features(values, names, frame_shift: float = 0.005, sample_rate: int = 0) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[1] != len(names):
        raise FeatureFileError(f"values {values.shape} do not match {len(names)} channel names")
    head = [FEATURE_MAGIC, struct.pack("<HIIdI", FEATURE_VERSION, values.shape[0], values.shape[1],
                                       float(frame_shift), int(sample_rate))]
    for n in names:
        raw = n.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(head) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def write_features(path, values, names, frame_shift: float = 0.005, sample_rate: int = 0) -> None:
    _atomic_bytes(Path(path), encode_features(values, names, frame_shift, sample_rate))


def decode_features(data: bytes, source: str = "<bytes>") -> FeatureFile:
    fixed = struct.calcsize("<HIIdI")
    if len(data) < 4 + fixed or data[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{source}: not a feature file (bad magic)")
    version, frames, channels, shift, rate = struct.unpack_from("<HIIdI", data, 4)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{source}: unsupported version {version}")
    pos = 4 + fixed
    names = []
    for _ in range(channels):
        if pos + 2 > len(data):
            raise FeatureFileError(f"{source}: truncated header")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n > len(data):
            raise FeatureFileError(f"{source}: truncated header")
        names.append(data[pos:pos + n].decode("utf-8"))
        pos += n
    need = frames * channels * 4
    if len(data) - pos != need:
        raise FeatureFileError(f"{source}: truncated body ({len(data) - pos} of {need} bytes)")
    values = np.frombuffer(data, dtype="<f4", count=frames * channels, offset=pos).reshape(frames, channels)
    return FeatureFile(values.astype(np.float32), tuple(names), shift, rate)


def read_features(path) -> FeatureFile:
    path = Path(path)
    return decode_features(path.read_bytes(), str(path))


# -- corpus generation and loading ----------------------------------------------

@dataclass
class Song:
    id: str
    split: str
    score: Score
    align: StateAlignment
    acoustic: AcousticSequence

    @property
    def n_frames(self) -> int:
        return self.align.n_frames

    @property
    def n_states(self) -> int:
        return len(self.align.entries)


@dataclass
class Corpus:
    config: CorpusConfig
    songs: list[Song] = field(default_factory=list)

    def split(self, name: str) -> list[Song]:
        return [s for s in self.songs if s.split == name]

    @property
    def train(self) -> list[Song]:
        return self.split("train")

    @property
    def test(self) -> list[Song]:
        return self.split("test")


def make_song(config: CorpusConfig, index: int) -> Song:
    rng = np.random.default_rng([config.seed, index])
    score = generate_score(rng, config)
    align = align_score(score, rng, config.n_states, config.frame_shift)
    split = "test" if index >= config.n_songs - config.n_test else "train"
    return Song(f"song{index:03d}", split, score, align, oracle_features(score, align, config))


def generate_corpus(config: CorpusConfig = CorpusConfig(), out_dir=None, threads: int = 1) -> Corpus:
    """Build every song (optionally in parallel) and write the corpus if ``out_dir`` is given."""
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            songs = list(ex.map(lambda i: make_song(config, i), range(config.n_songs)))
    else:
        songs = [make_song(config, i) for i in range(config.n_songs)]
    corpus = Corpus(config, songs)
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def write_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    for sub in ("scores", "align", "feats"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for song in corpus.songs:
        paths = {"score": f"scores/{song.id}.score", "align": f"align/{song.id}.align",
                 "feats": f"feats/{song.id}.feats"}
        _atomic_bytes(out / paths["score"], format_score(song.score).encode())
        _atomic_bytes(out / paths["align"], format_alignment(song.align).encode())
        write_features(out / paths["feats"], song.acoustic.values, song.acoustic.layout.names,
                       corpus.config.frame_shift)
        entries.append({"id": song.id, "split": song.split, "frames": song.n_frames,
                        "states": song.n_states, **paths})
    manifest = {"format": "cnnsvs-corpus", "version": 1, "config": corpus.config.to_dict(), "songs": entries}
    _atomic_bytes(out / "manifest.json", (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return out


def read_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    return json.loads(path.read_text())


def load_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    manifest = read_manifest(root)
    config = CorpusConfig(**manifest["config"])
    songs = []
    for e in manifest["songs"]:
        ff = read_features(root / e["feats"])
        acoustic = AcousticSequence(ff.values.astype(float), AcousticLayout.from_names(ff.names), ff.frame_shift)
        songs.append(Song(e["id"], e["split"], parse_score(root / e["score"]),
                          parse_alignment(root / e["align"]), acoustic))
    return Corpus(config, songs)
