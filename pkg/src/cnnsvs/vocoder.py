"""Acoustic feature layout and an MLSA-filter vocoder.

The MLSA filter realizes exp(sum_m c(m) z~^-m) with z~^-1 the first-order
all-pass (z^-1 - alpha) / (1 - alpha z^-1).  Coefficients are converted to
the b-form, the gain exp(b0) is applied directly and the remaining
exponential is split in two cascaded Pade-approximated stages (b1 alone,
then b2..bM), as in Imai's structure.
"""

from __future__ import annotations

import math
import os
import tempfile
import wave
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

# Pade coefficients A_{L,l} of exp(w) ~ (sum A w^l) / (sum A (-w)^l)
PADE = {
    4: (1.0, 4.999273e-1, 1.067005e-1, 1.170221e-2, 5.656279e-4),
    5: (1.0, 4.999391e-1, 1.107098e-1, 1.369984e-2, 9.564853e-4, 3.041721e-5),
}
# Largest |F(e^jw)| per stage for which the approximation stays within ~0.25 dB.
PADE_RANGE = {4: 4.5, 5: 6.0}

CNN1_CHANNELS = ("mcep0", "lf0", "vib_amp", "vib_freq")


@dataclass(frozen=True)
class AcousticLayout:
    n_mcep: int = 20  # c(0)..c(n_mcep - 1)
    n_ap: int = 5

    @property
    def names(self) -> tuple[str, ...]:
        return (tuple(f"mcep{i}" for i in range(self.n_mcep)) + ("lf0", "vuv")
                + tuple(f"ap{i}" for i in range(self.n_ap)) + ("vib_amp", "vib_freq", "vib_flag"))

    @property
    def dim(self) -> int:
        return self.n_mcep + self.n_ap + 5

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def flag_channels(self) -> tuple[int, ...]:
        return (self.index("vuv"), self.index("vib_flag"))

    @property
    def smooth_channels(self) -> tuple[int, ...]:
        flags = self.flag_channels
        return tuple(i for i in range(self.dim) if i not in flags)

    @classmethod
    def from_names(cls, names) -> "AcousticLayout":
        names = tuple(names)
        layout = cls(sum(n.startswith("mcep") for n in names), sum(n.startswith("ap") for n in names))
        if layout.names != names:
            raise ValueError(f"channel names do not follow the acoustic layout: {names}")
        return layout


@dataclass
class AcousticSequence:
    values: np.ndarray  # (T, layout.dim)
    layout: AcousticLayout = AcousticLayout()
    frame_shift: float = 0.005

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.layout.dim:
            raise ValueError(f"expected (T, {self.layout.dim}) acoustic values, got {self.values.shape}")

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, self.layout.index(name)]

    @property
    def mcep(self) -> np.ndarray:
        return self.values[:, :self.layout.n_mcep]

    @property
    def ap(self) -> np.ndarray:
        i = self.layout.index("ap0")
        return self.values[:, i:i + self.layout.n_ap]

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MLSAConfig:
    alpha: float = 0.42
    pade_order: int = 5
    sample_rate: int = 16000
    frame_shift: float = 0.005

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.pade_order not in PADE:
            raise ValueError(f"Pade order must be 4 or 5, got {self.pade_order}")

    @classmethod
    def for_rate(cls, sample_rate: int, frame_shift: float = 0.005) -> "MLSAConfig":
        alpha = {16000: 0.42, 48000: 0.55}.get(sample_rate)
        if alpha is None:
            raise ValueError(f"no default warping for {sample_rate} Hz (use 16000 or 48000)")
        return cls(alpha, 5, sample_rate, frame_shift)

    @property
    def hop(self) -> int:
        hop = self.frame_shift * self.sample_rate
        if abs(hop - round(hop)) > 1e-9:
            raise ValueError("frame shift times sample rate must be an integer")
        return int(round(hop))


def apply_vibrato(lf0: np.ndarray, amp_cents: np.ndarray, freq_hz: np.ndarray, flag: np.ndarray,
                  frame_shift: float = 0.005) -> np.ndarray:
    """Sinusoidal vibrato on a natural-log F0 track.

    f0'(t) = f0(t) * 2 ** (a(t) sin(phi(t)) / 1200); phi restarts at 0 on
    every 0 -> 1 flag transition and advances by 2 pi f_v(t) dt per flagged
    frame.  Unflagged frames are returned unchanged.
    """
    lf0 = np.asarray(lf0, dtype=float)
    amp, freq, flag = (np.asarray(a, dtype=float) for a in (amp_cents, freq_hz, flag))
    if not (lf0.shape == amp.shape == freq.shape == flag.shape):
        raise ValueError("vibrato tracks must have the same length")
    on = flag > 0.5
    phase = np.zeros_like(lf0)
    phi = 0.0
    for t in range(len(lf0)):
        if not on[t]:
            continue
        phi = 0.0 if t == 0 or not on[t - 1] else phi + 2 * math.pi * freq[t] * frame_shift
        phase[t] = phi
    out = lf0.copy()
    out[on] += amp[on] * np.sin(phase[on]) / 1200.0 * math.log(2.0)
    return out


def make_excitation(f0: np.ndarray, vuv: np.ndarray, aperiodicity: np.ndarray, sample_rate: int = 16000,
                    frame_shift: float = 0.005, seed: int = 0) -> np.ndarray:
    """Pulse/noise mixed excitation, each frame scaled to unit mean square.

    Voiced frames mix a pulse train (period sample_rate / f0) and white
    noise with weights sqrt(1 - a) and sqrt(a), a being the band-averaged
    aperiodicity in [0, 1]; unvoiced frames are noise.  Frames that come
    out all-zero (a voiced frame shorter than one period with a = 0) stay zero.
    """
    f0 = np.asarray(f0, dtype=float)
    vuv = np.asarray(vuv, dtype=float) > 0.5
    ap = np.asarray(aperiodicity, dtype=float)
    if ap.ndim == 2:
        ap = ap.mean(axis=1)
    ap = np.clip(ap, 0.0, 1.0)
    hop = MLSAConfig(sample_rate=sample_rate, frame_shift=frame_shift).hop
    if np.any(vuv & ~(f0 > 0)):
        bad = int(np.flatnonzero(vuv & ~(f0 > 0))[0])
        raise ValueError(f"voiced frame {bad} has nonpositive f0")
    T = len(f0)
    noise = np.random.default_rng(seed).standard_normal(T * hop)
    out = np.zeros(T * hop)
    next_pulse = None
    for t in range(T):
        seg = slice(t * hop, (t + 1) * hop)
        if not vuv[t]:
            next_pulse = None
            frame = noise[seg].copy()
        else:
            period = sample_rate / f0[t]
            pulses = np.zeros(hop)
            start = t * hop
            if next_pulse is None:
                next_pulse = float(start)
            while next_pulse < start + hop:
                pulses[int(next_pulse) - start] = math.sqrt(period)
                next_pulse += period
            a = ap[t]
            frame = math.sqrt(1.0 - a) * pulses + math.sqrt(a) * noise[seg]
        power = np.mean(frame * frame)
        out[seg] = frame / math.sqrt(power) if power > 0 else frame
    return out


def mc2b(mcep: np.ndarray, alpha: float) -> np.ndarray:
    """Mel-cepstrum to MLSA filter coefficients (last axis)."""
    mc = np.asarray(mcep, dtype=float)
    b = mc.copy()
    for m in range(mc.shape[-1] - 2, -1, -1):
        b[..., m] = mc[..., m] - alpha * b[..., m + 1]
    return b


def stage_magnitudes(mcep: np.ndarray, alpha: float, n_freq: int = 512) -> tuple[float, float]:
    """Peak |F| of the two Pade stages over frequency, for stability checks."""
    b = mc2b(np.atleast_2d(mcep), alpha)
    w = np.linspace(0, np.pi, n_freq)
    z1 = np.exp(-1j * w)
    phi1 = (1 - alpha ** 2) * z1 / (1 - alpha * z1)
    allpass = (z1 - alpha) / (1 - alpha * z1)
    M = b.shape[1] - 1
    basis = np.stack([phi1 * allpass ** (m - 1) for m in range(1, M + 1)])  # (M, n_freq)
    f1 = np.abs(b[:, 1:2] * basis[0]).max()
    f2 = np.abs(b[:, 2:] @ basis[1:]).max() if M >= 2 else 0.0
    return float(f1), float(f2)


@numba.njit(cache=True)
def _mlsa_kernel(x, b, alpha, pade, hop):
    N = x.shape[0]
    F, M1 = b.shape
    M = M1 - 1
    L = pade.shape[0] - 1
    aa = 1.0 - alpha * alpha
    u1 = np.zeros(L + 1)
    p1 = np.zeros(L + 1)
    u2 = np.zeros(L + 1)
    p2 = np.zeros((L + 1, M + 1))
    q = np.zeros(L + 1)
    bn = np.zeros(M + 1)
    y = np.empty(N)
    center0 = 0.5 * (hop - 1)
    for n in range(N):
        pos = (n - center0) / hop
        if pos <= 0.0:
            for m in range(M + 1):
                bn[m] = b[0, m]
        elif pos >= F - 1:
            for m in range(M + 1):
                bn[m] = b[F - 1, m]
        else:
            f = int(pos)
            r = pos - f
            for m in range(M + 1):
                bn[m] = (1.0 - r) * b[f, m] + r * b[f + 1, m]
        xn = x[n] * math.exp(bn[0])

        # stage 1: exp(b1 * Phi_1)
        for l in range(1, L + 1):
            p1[l] = aa * u1[l] + alpha * p1[l]
            q[l] = bn[1] * p1[l]
        e = xn
        out = 0.0
        for l in range(1, L + 1):
            v = pade[l] * q[l]
            e += v if l % 2 == 1 else -v
            out += v
        out += e
        u1[1] = e
        for l in range(2, L + 1):
            u1[l] = q[l - 1]
        xn = out

        # stage 2: exp(sum_{m>=2} b_m Phi_m)
        if M >= 2:
            for l in range(1, L + 1):
                old_prev = p2[l, 1]
                p2[l, 1] = aa * u2[l] + alpha * p2[l, 1]
                acc = 0.0
                for m in range(2, M + 1):
                    old_m = p2[l, m]
                    p2[l, m] = old_prev - alpha * p2[l, m - 1] + alpha * old_m
                    old_prev = old_m
                    acc += bn[m] * p2[l, m]
                q[l] = acc
            e = xn
            out = 0.0
            for l in range(1, L + 1):
                v = pade[l] * q[l]
                e += v if l % 2 == 1 else -v
                out += v
            out += e
            u2[1] = e
            for l in range(2, L + 1):
                u2[l] = q[l - 1]
            xn = out
        y[n] = xn
    return y


def mlsa_synthesize(mcep: np.ndarray, excitation: np.ndarray, config: MLSAConfig = MLSAConfig()) -> np.ndarray:
    """Filter the excitation with frame-wise mel-cepstra (linearly interpolated per sample)."""
    mcep = np.atleast_2d(np.asarray(mcep, dtype=float))
    excitation = np.asarray(excitation, dtype=float)
    if not np.all(np.isfinite(mcep)):
        raise ValueError("mel-cepstrum contains nonfinite values")
    hop = config.hop
    if excitation.shape[0] != mcep.shape[0] * hop:
        raise ValueError(f"excitation has {excitation.shape[0]} samples, expected {mcep.shape[0] * hop}")
    b = np.ascontiguousarray(mc2b(mcep, config.alpha))
    return _mlsa_kernel(np.ascontiguousarray(excitation), b, config.alpha,
                        np.array(PADE[config.pade_order]), hop)


def synthesize(acoustic: AcousticSequence, config: MLSAConfig | None = None, seed: int = 0) -> np.ndarray:
    config = config or MLSAConfig.for_rate(16000, acoustic.frame_shift)
    lf0 = apply_vibrato(acoustic.channel("lf0"), acoustic.channel("vib_amp"), acoustic.channel("vib_freq"),
                        acoustic.channel("vib_flag"), acoustic.frame_shift)
    vuv = acoustic.channel("vuv") > 0.5
    f0 = np.where(vuv, np.exp(lf0), 0.0)
    exc = make_excitation(f0, vuv, acoustic.ap, config.sample_rate, acoustic.frame_shift, seed)
    return mlsa_synthesize(acoustic.mcep, exc, config)


def _atomic_write(path: Path, write) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_wav(samples: np.ndarray, sample_rate: int, path) -> None:
    """16-bit PCM mono WAV; rescaled to peak -1 dBFS only if it would clip."""
    x = np.asarray(samples, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    peak = np.max(np.abs(x), initial=0.0)
    if peak > 1.0:
        x = x * (10 ** (-1 / 20) / peak)
    pcm = np.clip(np.round(x * 32767), -32768, 32767).astype("<i2")

    def write(tmp):
        with wave.open(tmp, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(sample_rate))
            w.writeframes(pcm.tobytes())

    _atomic_write(Path(path), write)


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM is supported")
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
        data = data.reshape(-1, w.getnchannels())[:, 0]
        return data.astype(float) / 32767, w.getframerate()
