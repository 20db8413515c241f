"""Musical scores, state alignments and frame-level input features.

Score file format (plain text, ``#`` starts a comment)::

    tempo 120
    key 0
    # pitch  beats  phonemes...
    R   0.5
    C4  1    k a
    A#4 1.5  a
    R   0.5

Header lines ``tempo <bpm>`` and ``key <0-11>`` may appear in any order
before the first note.  A note line is a pitch name (``C4``, ``F#3``,
``Bb5``), a MIDI number, or ``R`` for a rest, followed by its length in
beats and its phonemes.  Rests take no phonemes; they are aligned to the
silence phoneme ``sil``.

Alignment file format::

    frame_shift 0.005
    n_states 5
    # phoneme  state  start  end
    0 1 0 4
    0 2 4 9
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SILENCE = "sil"
N_KEYS = 12
N_POSITION = 5
POSITION_NAMES = ("pos_fwd", "pos_bwd", "pos_rel_state", "pos_state_dur", "pos_rel_phone")

_NOTE_OFFSETS = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
_PITCH_RE = re.compile(r"^([A-Ga-g])([#b]?)(-?\d+)$")


class ScoreError(ValueError):
    """Raised for malformed score or alignment input."""


@dataclass(frozen=True)
class Note:
    pitch: int | None  # MIDI note number, None for a rest
    beats: float
    phonemes: tuple[str, ...] = ()

    @property
    def is_rest(self) -> bool:
        return self.pitch is None


@dataclass(frozen=True)
class Score:
    notes: tuple[Note, ...]
    tempo: float = 120.0
    key: int = 0

    def __post_init__(self):
        if self.tempo <= 0:
            raise ScoreError(f"tempo must be positive, got {self.tempo}")
        if not 0 <= self.key < N_KEYS:
            raise ScoreError(f"key must be in 0..11, got {self.key}")
        for i, note in enumerate(self.notes):
            if not note.beats > 0:
                raise ScoreError(f"note {i}: duration must be positive, got {note.beats}")
            if not note.is_rest and not note.phonemes:
                raise ScoreError(f"note {i}: pitched note needs at least one phoneme")

    def seconds(self, beats: float) -> float:
        return beats * 60.0 / self.tempo

    @property
    def total_seconds(self) -> float:
        return self.seconds(sum(n.beats for n in self.notes))


@dataclass(frozen=True)
class PhonemeSlot:
    symbol: str
    note: int
    position: int  # 0-based index inside the note
    count: int  # phonemes in the note


def score_phonemes(score: Score) -> list[PhonemeSlot]:
    """Flatten a score into its phoneme sequence (rests become ``sil``)."""
    slots = []
    for i, note in enumerate(score.notes):
        phonemes = (SILENCE,) if note.is_rest else note.phonemes
        for j, p in enumerate(phonemes):
            slots.append(PhonemeSlot(p, i, j, len(phonemes)))
    return slots


def pitch_to_midi(name: str) -> int:
    if re.fullmatch(r"-?\d+", name):
        return int(name)
    m = _PITCH_RE.match(name)
    if m is None:
        raise ScoreError(f"bad pitch name {name!r}")
    letter, accidental, octave = m.groups()
    semitone = _NOTE_OFFSETS[letter.upper()] + {"#": 1, "b": -1, "": 0}[accidental]
    return 12 * (int(octave) + 1) + semitone


def midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69) / 12.0)


def parse_score_text(text: str, source: str = "<string>") -> Score:
    tempo, key = 120.0, 0
    notes = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        where = f"{source}:{lineno}"
        head = fields[0].lower()
        if head in ("tempo", "key"):
            if notes:
                raise ScoreError(f"{where}: header field {head!r} after first note")
            if len(fields) != 2:
                raise ScoreError(f"{where}: {head} takes exactly one value")
            try:
                if head == "tempo":
                    tempo = float(fields[1])
                else:
                    key = int(fields[1])
            except ValueError:
                raise ScoreError(f"{where}: bad {head} value {fields[1]!r}") from None
            continue
        if len(fields) < 2:
            raise ScoreError(f"{where}: note needs a pitch and a duration")
        try:
            beats = float(fields[1])
        except ValueError:
            raise ScoreError(f"{where}: bad duration {fields[1]!r}") from None
        if not beats > 0:
            raise ScoreError(f"{where}: duration must be positive, got {fields[1]}")
        if fields[0].upper() == "R":
            if len(fields) > 2:
                raise ScoreError(f"{where}: rests take no phonemes")
            notes.append(Note(None, beats))
            continue
        try:
            pitch = pitch_to_midi(fields[0])
        except ScoreError as exc:
            raise ScoreError(f"{where}: {exc}") from None
        if len(fields) < 3:
            raise ScoreError(f"{where}: pitched note needs at least one phoneme")
        notes.append(Note(pitch, beats, tuple(fields[2:])))
    try:
        return Score(tuple(notes), tempo=tempo, key=key)
    except ScoreError as exc:
        raise ScoreError(f"{source}: {exc}") from None


def parse_score(path) -> Score:
    path = Path(path)
    return parse_score_text(path.read_text(), source=str(path))


def format_score(score: Score) -> str:
    lines = [f"tempo {score.tempo:g}", f"key {score.key}"]
    for note in score.notes:
        pitch = "R" if note.is_rest else str(note.pitch)
        lines.append(" ".join([pitch, f"{note.beats:g}", *note.phonemes]))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class AlignmentEntry:
    phoneme: int
    state: int  # 1..n_states
    start: int
    end: int

    @property
    def frames(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class StateAlignment:
    entries: tuple[AlignmentEntry, ...]
    frame_shift: float = 0.005
    n_states: int = 5

    def __post_init__(self):
        pos = 0
        for i, e in enumerate(self.entries):
            if e.start != pos:
                raise ScoreError(f"alignment entry {i}: starts at {e.start}, expected {pos}")
            if e.end <= e.start:
                raise ScoreError(f"alignment entry {i}: empty span [{e.start}, {e.end})")
            expected = 1 if i == 0 or self.entries[i - 1].state == self.n_states else self.entries[i - 1].state + 1
            if e.state != expected:
                raise ScoreError(f"alignment entry {i}: state {e.state}, expected {expected}")
            if expected == 1 and i > 0 and e.phoneme != self.entries[i - 1].phoneme + 1:
                raise ScoreError(f"alignment entry {i}: phoneme index must advance by one")
            if expected != 1 and e.phoneme != self.entries[i - 1].phoneme:
                raise ScoreError(f"alignment entry {i}: phoneme changes inside a state sequence")
            pos = e.end
        if self.entries and self.entries[-1].state != self.n_states:
            raise ScoreError("alignment ends in the middle of a phoneme")

    @property
    def n_frames(self) -> int:
        return self.entries[-1].end if self.entries else 0

    @property
    def durations(self) -> np.ndarray:
        return np.array([e.frames for e in self.entries], dtype=np.int64)

    @property
    def n_phonemes(self) -> int:
        return len(self.entries) // self.n_states

    def phoneme_spans(self) -> list[tuple[int, int]]:
        s = self.n_states
        return [(self.entries[i].start, self.entries[i + s - 1].end) for i in range(0, len(self.entries), s)]

    def frame_states(self) -> np.ndarray:
        """Index of the alignment entry covering each frame."""
        return np.repeat(np.arange(len(self.entries)), self.durations)


def alignment_from_durations(durations: Sequence[Sequence[int]], frame_shift: float = 0.005) -> StateAlignment:
    """Build an alignment from per-phoneme lists of state durations."""
    n_states = len(durations[0]) if durations else 5
    entries, pos = [], 0
    for p, states in enumerate(durations):
        if len(states) != n_states:
            raise ScoreError(f"phoneme {p}: expected {n_states} state durations")
        for s, d in enumerate(states, 1):
            entries.append(AlignmentEntry(p, s, pos, pos + int(d)))
            pos += int(d)
    return StateAlignment(tuple(entries), frame_shift, n_states)


def format_alignment(align: StateAlignment) -> str:
    lines = [f"frame_shift {align.frame_shift!r}", f"n_states {align.n_states}"]
    lines += [f"{e.phoneme} {e.state} {e.start} {e.end}" for e in align.entries]
    return "\n".join(lines) + "\n"


def parse_alignment(path) -> StateAlignment:
    path = Path(path)
    shift, n_states, entries = 0.005, 5, []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        try:
            if fields[0] == "frame_shift":
                shift = float(fields[1])
            elif fields[0] == "n_states":
                n_states = int(fields[1])
            else:
                entries.append(AlignmentEntry(*(int(f) for f in fields)))
        except (ValueError, TypeError, IndexError):
            raise ScoreError(f"{path}:{lineno}: malformed alignment line {raw!r}") from None
    return StateAlignment(tuple(entries), shift, n_states)


def _check_covers(score: Score, align: StateAlignment) -> list[PhonemeSlot]:
    slots = score_phonemes(score)
    if align.n_phonemes != len(slots):
        raise ScoreError(f"alignment has {align.n_phonemes} phonemes, score has {len(slots)}")
    return slots


def note_logf0_track(score: Score, align: StateAlignment) -> np.ndarray:
    """Per-frame natural-log note frequency; rests linearly interpolated.

    Leading and trailing rests hold the nearest pitched value.
    """
    slots = _check_covers(score, align)
    if all(n.is_rest for n in score.notes):
        raise ScoreError("score has no pitched note to anchor the logF0 track")
    track = np.full(align.n_frames, np.nan)
    for p, (start, end) in enumerate(align.phoneme_spans()):
        note = score.notes[slots[p].note]
        if not note.is_rest:
            track[start:end] = math.log(midi_to_hz(note.pitch))
    known = np.flatnonzero(~np.isnan(track))
    missing = np.flatnonzero(np.isnan(track))
    if missing.size:
        track[missing] = np.interp(missing, known, track[known])
    return track


@dataclass(frozen=True)
class ContextConfig:
    """Layout of state-level context vectors.

    ``n_binary`` / ``n_numerical`` pad the blocks with reserved zero
    columns up to a fixed width; ``None`` keeps the core width.
    """

    phonemes: tuple[str, ...]
    n_states: int = 5
    n_binary: int | None = None
    n_numerical: int | None = None

    NUMERICAL = ("note_pitch", "note_frames", "note_beats", "tempo",
                 "phones_in_note", "phone_pos_in_note", "phone_frames")

    def __post_init__(self):
        if len(set(self.phonemes)) != len(self.phonemes):
            raise ValueError("duplicate phoneme symbols")
        if self.n_binary is not None and self.n_binary < self.core_binary:
            raise ValueError(f"n_binary {self.n_binary} < required {self.core_binary}")
        if self.n_numerical is not None and self.n_numerical < len(self.NUMERICAL):
            raise ValueError(f"n_numerical {self.n_numerical} < required {len(self.NUMERICAL)}")

    @classmethod
    def full_scale(cls, phonemes, n_states: int = 5) -> "ContextConfig":
        return cls(tuple(phonemes), n_states, n_binary=724, n_numerical=122)

    @property
    def core_binary(self) -> int:
        return 3 * len(self.phonemes) + self.n_states + N_KEYS

    @property
    def binary_width(self) -> int:
        return self.n_binary if self.n_binary is not None else self.core_binary

    @property
    def numerical_width(self) -> int:
        return self.n_numerical if self.n_numerical is not None else len(self.NUMERICAL)

    @property
    def width(self) -> int:
        return self.binary_width + self.numerical_width

    def names(self) -> list[str]:
        names = [f"{rel}={p}" for rel in ("prev", "cur", "next") for p in self.phonemes]
        names += [f"state={s}" for s in range(1, self.n_states + 1)]
        names += [f"key={k}" for k in range(N_KEYS)]
        names += [f"reserved_bin{i}" for i in range(self.binary_width - len(names))]
        num = list(self.NUMERICAL)
        num += [f"reserved_num{i}" for i in range(self.numerical_width - len(num))]
        return names + num


def encode_context_features(score: Score, align: StateAlignment, config: ContextConfig) -> np.ndarray:
    """One context vector per alignment entry: binary one-hots then numericals."""
    slots = _check_covers(score, align)
    if align.n_states != config.n_states:
        raise ScoreError(f"alignment uses {align.n_states} states, config {config.n_states}")
    index = {p: i for i, p in enumerate(config.phonemes)}
    for slot in slots:
        if slot.symbol not in index:
            raise ScoreError(f"unknown phoneme symbol {slot.symbol!r}")
    P, S = len(config.phonemes), config.n_states
    spans = align.phoneme_spans()
    note_frames = np.zeros(len(score.notes), dtype=np.int64)
    for slot, (a, b) in zip(slots, spans):
        note_frames[slot.note] += b - a

    out = np.zeros((len(align.entries), config.width))
    nb = config.binary_width
    for i, e in enumerate(align.entries):
        p = e.phoneme
        slot = slots[p]
        note = score.notes[slot.note]
        row = out[i]
        if p > 0:
            row[index[slots[p - 1].symbol]] = 1.0
        row[P + index[slot.symbol]] = 1.0
        if p + 1 < len(slots):
            row[2 * P + index[slots[p + 1].symbol]] = 1.0
        row[3 * P + e.state - 1] = 1.0
        row[3 * P + S + score.key] = 1.0
        row[nb:nb + 7] = (
            0.0 if note.is_rest else note.pitch,
            note_frames[slot.note],
            note.beats,
            score.tempo,
            slot.count,
            slot.position + 1,
            spans[p][1] - spans[p][0],
        )
    return out


def position_features(align: StateAlignment) -> np.ndarray:
    """Per-frame [forward, backward, relative-in-state, state duration, relative-in-phoneme].

    One-frame spans get relative position 0.
    """
    out = np.zeros((align.n_frames, N_POSITION))
    for e in align.entries:
        d = e.frames
        fwd = np.arange(d, dtype=float)
        out[e.start:e.end, 0] = fwd
        out[e.start:e.end, 1] = d - 1 - fwd
        out[e.start:e.end, 2] = fwd / (d - 1) if d > 1 else 0.0
        out[e.start:e.end, 3] = d
    for a, b in align.phoneme_spans():
        d = b - a
        out[a:b, 4] = np.arange(d) / (d - 1) if d > 1 else 0.0
    return out


@dataclass
class FrameFeatureMatrix:
    """Frame-level inputs; the first ``n_context`` columns are state-constant."""

    values: np.ndarray
    names: tuple[str, ...]
    n_context: int = 0

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def context(self) -> np.ndarray:
        return self.values[:, :self.n_context]

    @property
    def frame_columns(self) -> np.ndarray:
        return self.values[:, self.n_context:]


def expand_to_frames(state_vectors: np.ndarray, align: StateAlignment, frame_columns: np.ndarray,
                     names: Sequence[str] | None = None) -> FrameFeatureMatrix:
    """Repeat each state vector over its frames and append per-frame columns."""
    state_vectors = np.asarray(state_vectors, dtype=float)
    frame_columns = np.asarray(frame_columns, dtype=float)
    if state_vectors.ndim != 2 or state_vectors.shape[0] != len(align.entries):
        raise ScoreError(f"got {len(state_vectors)} state vectors for {len(align.entries)} alignment entries")
    if frame_columns.ndim != 2 or frame_columns.shape[0] != align.n_frames:
        raise ScoreError(f"got {len(frame_columns)} frame rows for {align.n_frames} frames")
    values = np.hstack([np.repeat(state_vectors, align.durations, axis=0), frame_columns])
    if names is None:
        names = [f"f{i}" for i in range(values.shape[1])]
    return FrameFeatureMatrix(values, tuple(names), state_vectors.shape[1])


def frame_level_columns(score: Score, align: StateAlignment) -> np.ndarray:
    """Columns that vary inside a state: note logF0 and position features."""
    return np.hstack([note_logf0_track(score, align)[:, None], position_features(align)])


FRAME_COLUMN_NAMES = ("note_logf0",) + POSITION_NAMES


def build_frame_features(score: Score, align: StateAlignment, config: ContextConfig) -> FrameFeatureMatrix:
    states = encode_context_features(score, align, config)
    names = config.names() + list(FRAME_COLUMN_NAMES)
    return expand_to_frames(states, align, frame_level_columns(score, align), names)


@dataclass
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=float)
        self.maximum = np.asarray(self.maximum, dtype=float)
        if not self.lo < self.hi:
            raise ValueError(f"bad target range ({self.lo}, {self.hi})")
        if np.any(self.maximum < self.minimum):
            raise ValueError("maximum below minimum")

    def _scale(self):
        span = self.maximum - self.minimum
        const = span == 0
        return np.where(const, 0.0, (self.hi - self.lo) / np.where(const, 1.0, span)), const


def fit_normalization(matrices: Iterable[np.ndarray], range: tuple[float, float] = (0.0, 1.0)) -> NormalizationStats:
    lo_v = hi_v = None
    for m in matrices:
        m = np.asarray(m, dtype=float)
        if m.shape[0] == 0:
            continue
        mn, mx = m.min(axis=0), m.max(axis=0)
        lo_v = mn if lo_v is None else np.minimum(lo_v, mn)
        hi_v = mx if hi_v is None else np.maximum(hi_v, mx)
    if lo_v is None:
        raise ValueError("no data to fit normalization")
    return NormalizationStats(lo_v, hi_v, *range)


def normalize(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    scale, const = stats._scale()
    y = stats.lo + (np.asarray(x, dtype=float) - stats.minimum) * scale
    return np.where(const, 0.5 * (stats.lo + stats.hi), y)


def denormalize(y: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    span = stats.maximum - stats.minimum
    return stats.minimum + (np.asarray(y, dtype=float) - stats.lo) * (span / (stats.hi - stats.lo))
