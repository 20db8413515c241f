import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnnsvs.score import (
    ContextConfig,
    Note,
    Score,
    ScoreError,
    StateAlignment,
    AlignmentEntry,
    alignment_from_durations,
    build_frame_features,
    denormalize,
    encode_context_features,
    fit_normalization,
    format_alignment,
    format_score,
    midi_to_hz,
    normalize,
    note_logf0_track,
    parse_alignment,
    parse_score_text,
    pitch_to_midi,
    position_features,
)

CFG = ContextConfig(("sil", "a", "i", "k"), 5)


def _score():
    return parse_score_text("tempo 120\nkey 3\nR 0.5\nC4 1 k a\nE4 1 i\n")


def _align(n_phonemes=4, d=2):
    return alignment_from_durations([[d] * 5 for _ in range(n_phonemes)])


def test_pitch_names():
    assert pitch_to_midi("C4") == 60
    assert pitch_to_midi("A4") == 69
    assert pitch_to_midi("F#3") == 54
    assert pitch_to_midi("Bb5") == 82
    assert pitch_to_midi("61") == 61
    assert midi_to_hz(69) == pytest.approx(440.0)
    with pytest.raises(ScoreError):
        pitch_to_midi("H2")


def test_parse_score():
    s = _score()
    assert s.tempo == 120 and s.key == 3
    assert s.notes[0].is_rest and s.notes[1].phonemes == ("k", "a")
    assert s.seconds(2) == pytest.approx(1.0)
    assert s.total_seconds == pytest.approx(1.25)


@pytest.mark.parametrize("text", [
    "tempo 0\nC4 1 a\n",
    "key C\nC4 1 a\n",
    "key 12\nC4 1 a\n",
    "C4 1\n",
    "C4 -1 a\n",
    "R 1 a\n",
    "C4 1 a\ntempo 100\n",
    "Q4 1 a\n",
])
def test_bad_scores(text):
    with pytest.raises(ScoreError):
        parse_score_text(text)


def test_score_round_trip():
    s = _score()
    assert parse_score_text(format_score(s)) == s


def test_alignment_validation():
    with pytest.raises(ScoreError):
        StateAlignment((AlignmentEntry(0, 2, 0, 3),))
    with pytest.raises(ScoreError):
        StateAlignment((AlignmentEntry(0, 1, 0, 0),), n_states=1)
    with pytest.raises(ScoreError):
        StateAlignment((AlignmentEntry(0, 1, 0, 2), AlignmentEntry(0, 2, 3, 4)), n_states=2)
    with pytest.raises(ScoreError):
        StateAlignment((AlignmentEntry(0, 1, 0, 2),), n_states=2)


def test_alignment_round_trip(tmp_path):
    a = alignment_from_durations([[1, 2, 3], [4, 5, 6]])
    p = tmp_path / "x.align"
    p.write_text(format_alignment(a))
    b = parse_alignment(p)
    assert b == a and b.n_frames == 21 and b.n_phonemes == 2
    assert b.phoneme_spans() == [(0, 6), (6, 21)]


def test_logf0_interpolates_rests():
    s = parse_score_text("R 1\nC4 1 a\nR 1\nC5 1 a\nR 1\n")
    a = alignment_from_durations([[2] * 5] * 5)
    tr = note_logf0_track(s, a)
    lo, hi = math.log(midi_to_hz(60)), math.log(midi_to_hz(72))
    assert np.allclose(tr[:20], lo)  # leading rest holds the first note
    assert np.allclose(tr[30:40], hi) and np.allclose(tr[40:], hi)
    assert np.all(np.diff(tr[20:30]) > 0)
    with pytest.raises(ScoreError):
        note_logf0_track(parse_score_text("R 1\n"), alignment_from_durations([[1] * 5]))


def test_position_features():
    a = alignment_from_durations([[3, 1]], 0.005)
    p = position_features(a)
    assert np.allclose(p[:, 0], [0, 1, 2, 0])
    assert np.allclose(p[:, 1], [2, 1, 0, 0])
    assert np.allclose(p[:, 2], [0, 0.5, 1, 0])
    assert np.allclose(p[:, 3], [3, 3, 3, 1])
    assert np.allclose(p[:, 4], [0, 1 / 3, 2 / 3, 1])


def test_context_encoding():
    s, a = _score(), _align()
    ctx = encode_context_features(s, a, CFG)
    assert ctx.shape == (20, CFG.width)
    names = CFG.names()
    row = dict(zip(names, ctx[5]))  # phoneme 1 ("k"), state 1
    assert row["prev=sil"] == 1 and row["cur=k"] == 1 and row["next=a"] == 1
    assert row["state=1"] == 1 and row["key=3"] == 1
    assert row["note_pitch"] == 60 and row["phones_in_note"] == 2 and row["phone_pos_in_note"] == 1
    assert row["note_frames"] == 20 and row["phone_frames"] == 10
    # every row has exactly one current phoneme, one state and one key
    P = len(CFG.phonemes)
    assert np.all(ctx[:, P:2 * P].sum(1) == 1)
    assert np.all(ctx[:, 3 * P:3 * P + 5].sum(1) == 1)


def test_full_scale_context_padding():
    cfg = ContextConfig.full_scale(CFG.phonemes)
    assert cfg.binary_width == 724 and cfg.numerical_width == 122 and cfg.width == 846
    ctx = encode_context_features(_score(), _align(), cfg)
    core = encode_context_features(_score(), _align(), CFG)
    assert np.array_equal(ctx[:, :CFG.core_binary], core[:, :CFG.core_binary])
    assert np.all(ctx[:, CFG.core_binary:724] == 0)
    assert np.all(ctx[:, 724 + 7:] == 0)


def test_context_errors():
    with pytest.raises(ScoreError):
        encode_context_features(_score(), _align(3), CFG)
    with pytest.raises(ScoreError):
        encode_context_features(_score(), _align(), ContextConfig(("sil", "a", "i")))


def test_frame_features_are_state_constant():
    f = build_frame_features(_score(), _align(d=3), CFG)
    assert f.values.shape == (60, CFG.width + 6)
    starts = np.arange(0, 60, 3)
    assert np.array_equal(f.context, np.repeat(f.context[starts], 3, axis=0))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rows=st.integers(1, 20), cols=st.integers(1, 5))
def test_normalization_round_trip(seed, rows, cols):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 10
    st_ = fit_normalization([x], (0.01, 0.99))
    y = normalize(x, st_)
    assert np.all(y >= 0.01 - 1e-12) and np.all(y <= 0.99 + 1e-12)
    nonconst = st_.maximum > st_.minimum
    assert np.allclose(denormalize(y, st_)[:, nonconst], x[:, nonconst])


def test_constant_column_maps_to_midpoint():
    x = np.array([[1.0, 2.0], [1.0, 4.0]])
    s = fit_normalization([x])
    assert np.allclose(normalize(x, s)[:, 0], 0.5)
    assert np.allclose(denormalize(normalize(x, s), s), x)
    with pytest.raises(ValueError):
        fit_normalization([])


def test_note_validation():
    with pytest.raises(ScoreError):
        Score((Note(60, 1.0),))
    with pytest.raises(ScoreError):
        Score((Note(60, 0.0, ("a",)),))
