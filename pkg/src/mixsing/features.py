"""Audio features: WAV input, log-mel extraction, MCD and the synthetic corpus.

Mel spectrograms are ``(frames, 120)`` float32 arrays of natural-log
magnitudes floored at ``log(1e-5)``.
"""

from __future__ import annotations

import io
import math
import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .errors import DegenerateInputError, DimensionError, FormatError
from .score import (
    DEFAULT_VOCAB,
    HOP,
    REST,
    SAMPLE_RATE,
    NoteEvent,
    Score,
    Vocab,
    align_to_frames,
    time_to_frame,
)

N_FFT = 1024
WIN_LENGTH = 800
N_MELS = 120
PREEMPHASIS = 0.97
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-5
LOG_FLOOR_VALUE = float(np.float32(math.log(LOG_FLOOR)))
N_CEPSTRA = 12


@dataclass
class Waveform:
    sample_rate: int
    samples: np.ndarray

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


# --------------------------------------------------------------------------
# WAV


def read_wav(data: bytes) -> Waveform:
    """Decode a mono 16 kHz PCM16 WAV file."""
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            if wf.getcomptype() != "NONE":
                raise FormatError(f"unsupported codec {wf.getcomptype()}")
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"unreadable WAV: {exc}") from exc
    if channels != 1:
        raise FormatError(f"expected mono audio, got {channels} channels")
    if width != 2:
        raise FormatError(f"expected 16-bit PCM, got {8 * width}-bit samples")
    if rate != SAMPLE_RATE:
        raise FormatError(f"expected {SAMPLE_RATE} Hz, got {rate} Hz (no resampling)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(rate, pcm.astype(np.float32) / np.float32(32768.0))


def encode_wav(w: Waveform) -> bytes:
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


# --------------------------------------------------------------------------
# mel scale and filterbank


def mel_scale(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(n_mels: int = N_MELS, fmin: float = F_MIN, fmax: float = F_MAX) -> np.ndarray:
    """``n_mels + 2`` equally spaced mel values: the edges and centres of the triangles."""
    return np.linspace(mel_scale(fmin), mel_scale(fmax), n_mels + 2)


@lru_cache(maxsize=8)
def _filterbank(n_mels: int, n_fft: int, sr: int, fmin: float, fmax: float) -> np.ndarray:
    hz = mel_to_hz(mel_points(n_mels, fmin, fmax))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower = (freqs[None, :] - hz[:-2, None]) / (hz[1:-1] - hz[:-2])[:, None]
    upper = (hz[2:, None] - freqs[None, :]) / (hz[2:] - hz[1:-1])[:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper)).astype(np.float32)
    fb.setflags(write=False)
    return fb


def mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE, fmin: float = F_MIN, fmax: float = F_MAX
) -> np.ndarray:
    """Triangular HTK-scale filters, shape ``(n_mels, n_fft // 2 + 1)``, peak weight 1."""
    return _filterbank(n_mels, n_fft, sr, fmin, fmax)


# --------------------------------------------------------------------------
# STFT


def preemphasis(x: np.ndarray, coef: float = PREEMPHASIS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = x.copy()
    y[1:] -= coef * x[:-1]
    return y


def analysis_window() -> np.ndarray:
    """Periodic Hann window of length 800, centred in a 1024-sample frame."""
    n = np.arange(WIN_LENGTH)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_LENGTH)
    left = (N_FFT - WIN_LENGTH) // 2
    win = np.zeros(N_FFT)
    win[left : left + WIN_LENGTH] = hann
    return win


def frame_signal(x: np.ndarray) -> np.ndarray:
    """Reflect-pad by ``N_FFT // 2`` and cut ``1 + len(x) // HOP`` windowed frames."""
    n = len(x)
    if n < 1:
        raise DegenerateInputError("empty signal")
    padded = np.pad(x, N_FFT // 2, mode="reflect") if n > 1 else np.full(n + N_FFT, x[0])
    count = 1 + n // HOP
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(count)[:, None]
    return padded[idx] * analysis_window()


def stft_magnitude(x: np.ndarray) -> np.ndarray:
    """Linear magnitude spectrum, shape ``(frames, 513)``, without pre-emphasis."""
    return np.abs(np.fft.rfft(frame_signal(np.asarray(x, dtype=np.float64)), axis=-1))


def extract_mel(w: Waveform) -> np.ndarray:
    if w.sample_rate != SAMPLE_RATE:
        raise FormatError(f"expected {SAMPLE_RATE} Hz audio")
    if len(w.samples) < 1:
        raise DegenerateInputError("empty waveform")
    mag = stft_magnitude(preemphasis(w.samples))
    mel = mag @ mel_filterbank().T.astype(np.float64)
    return np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)


def frame_count(n_samples: int) -> int:
    return 1 + n_samples // HOP


# --------------------------------------------------------------------------
# MCD


def cepstra(mel: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel row."""
    return dct(np.asarray(mel, dtype=np.float64), type=2, norm="ortho", axis=-1)


def mcd(a: np.ndarray, b: np.ndarray, n_coeffs: int = N_CEPSTRA) -> float:
    """Mean mel-cepstral distortion in dB over frames, ``c0`` excluded."""
    if a.shape != b.shape:
        raise DimensionError(f"mcd shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[0] == 0:
        raise DimensionError("mcd needs a non-empty 2-D spectrogram")
    diff = cepstra(a)[:, 1 : n_coeffs + 1] - cepstra(b)[:, 1 : n_coeffs + 1]
    per_frame = np.sqrt(2.0 * np.sum(diff * diff, axis=1))
    return float(10.0 / math.log(10.0) * per_frame.mean())


# --------------------------------------------------------------------------
# MEL1 files

MEL1_MAGIC = b"MEL1"


def encode_mel(mel: np.ndarray) -> bytes:
    m = np.ascontiguousarray(mel, dtype="<f4")
    if m.ndim != 2:
        raise DimensionError("mel must be 2-D")
    return MEL1_MAGIC + struct.pack("<II", *m.shape) + m.tobytes()


def decode_mel(data: bytes) -> np.ndarray:
    if data[:4] != MEL1_MAGIC or len(data) < 12:
        raise FormatError("not a MEL1 file")
    frames, bins = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * frames * bins:
        raise FormatError("MEL1 payload size does not match its header")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(frames, bins)


def write_mel(path, mel: np.ndarray) -> None:
    Path(path).write_bytes(encode_mel(mel))


def read_mel(path) -> np.ndarray:
    return decode_mel(Path(path).read_bytes())


# --------------------------------------------------------------------------
# synthetic oracle corpus

SYLLABLE_POOL = (
    "가나다라마바사아자차카타파하"
    "강산달별꽃눈봄밤길물"
    "노래비솔미도레시랑"
    "엄빠우리너의"
)

N_HARMONICS = 6
HARMONIC_DECAY = 0.6
BUMP_WIDTH = 1.2  # mel bins
VOICED_FLOOR = 1e-3
FADE_WEIGHTS = ((-1, 0.25), (0, 0.5), (1, 0.75))


def midi_to_hz(pitch: int) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def mel_bin_position(f_hz: float) -> float:
    """Fractional mel-bin index of frequency ``f_hz`` (bin j is centred on point j+1)."""
    pts = mel_points()
    return float((mel_scale(f_hz) - pts[1]) / (pts[1] - pts[0]))


def harmonic_spectrum(pitch: int) -> np.ndarray:
    bins = np.arange(N_MELS, dtype=np.float64)
    out = np.full(N_MELS, VOICED_FLOOR)
    f0 = midi_to_hz(pitch)
    for h in range(1, N_HARMONICS + 1):
        if h * f0 >= F_MAX:
            break
        pos = mel_bin_position(h * f0)
        out += HARMONIC_DECAY ** (h - 1) * np.exp(-0.5 * ((bins - pos) / BUMP_WIDTH) ** 2)
    return out


@lru_cache(maxsize=None)
def consonant_template(role: str, index: int) -> np.ndarray:
    """Fixed broadband shape for one onset or coda class (independent of any dataset seed)."""
    rng = np.random.default_rng([0x5EED, 0 if role == "onset" else 1, index])
    amp = rng.uniform(0.2, 0.6)
    centre = rng.uniform(30.0, 110.0)
    width = rng.uniform(20.0, 50.0)
    bins = np.arange(N_MELS, dtype=np.float64)
    t = amp * np.exp(-(((bins - centre) / width) ** 2))
    t.setflags(write=False)
    return t


def oracle_mel(score: Score, total_frames: int | None = None, k: int = 3, vocab: Vocab = DEFAULT_VOCAB) -> np.ndarray:
    """Deterministic target mel for a score.

    Nucleus frames carry harmonic bumps at ``h * f0``; onset and coda frames add
    their consonant template; rests sit at the log floor.  Every change of
    event is smoothed by a 3-frame linear cross-fade in the linear domain.
    """
    align = align_to_frames(score, k=k, total_frames=total_frames, vocab=vocab)
    lin = np.zeros((align.frames, N_MELS))
    spectra: dict[int, np.ndarray] = {}
    for t in range(align.frames):
        pid = int(align.pitch_ids[t])
        if pid == vocab.silence:
            continue
        if pid not in spectra:
            spectra[pid] = harmonic_spectrum(vocab.midi_of(pid))
        lin[t] = spectra[pid]
        ph = int(align.phoneme_ids[t])
        role = vocab.role(ph)
        if role == "onset":
            lin[t] += consonant_template("onset", ph - vocab.ONSET0)
        elif role == "coda":
            lin[t] += consonant_template("coda", ph - vocab.CODA0)

    out = lin.copy()
    owner = align.note_index
    for b in np.flatnonzero(owner[1:] != owner[:-1]) + 1:
        before, after = lin[b - 1], lin[b]
        for offset, alpha in FADE_WEIGHTS:
            t = b + offset
            if 0 <= t < align.frames:
                out[t] = (1.0 - alpha) * before + alpha * after
    return np.log(np.maximum(out, LOG_FLOOR)).astype(np.float32)


def random_score(rng: np.random.Generator, seconds: float, vocab: Vocab = DEFAULT_VOCAB) -> Score:
    """Random monophonic melody on the frame grid with occasional rests."""
    total = time_to_frame(seconds)
    frame_s = HOP / SAMPLE_RATE
    notes: list[NoteEvent] = []
    t = int(rng.integers(0, 16))
    pitch = vocab.base_note + int(rng.integers(0, vocab.n_notes))
    while t < total:
        if rng.random() < 0.12:
            t += int(rng.integers(8, 31))
            continue
        n = int(rng.integers(10, 61))
        end = min(t + n, total)
        if end - t < 4:
            break
        pitch = int(np.clip(pitch + rng.integers(-4, 5), vocab.base_note, vocab.base_note + vocab.n_notes - 1))
        syl = SYLLABLE_POOL[int(rng.integers(0, len(SYLLABLE_POOL)))]
        notes.append(NoteEvent(pitch, t * frame_s, end * frame_s, syl))
        t = end
    return Score(notes)


def synth_dataset(
    songs: int, seconds: float, seed: int, k: int = 3, vocab: Vocab = DEFAULT_VOCAB
) -> list[tuple[Score, np.ndarray]]:
    """``songs`` random scores with their oracle mels, all ``seconds`` long."""
    frames = time_to_frame(seconds)
    out = []
    for i in range(songs):
        rng = np.random.default_rng([seed, i])
        score = random_score(rng, seconds, vocab)
        out.append((score, oracle_mel(score, total_frames=frames, k=k, vocab=vocab)))
    return out


def rest_score(seconds: float) -> Score:
    return Score([NoteEvent(-1, 0.0, seconds, REST)])
