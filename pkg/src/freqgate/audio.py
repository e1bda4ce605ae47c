"""Waveform I/O, STFT/ISTFT, log-power features and one-third octave bands.

All transforms use a 512-sample periodic Hann window with a 256-sample hop
at 16 kHz, giving 257 frequency bins.  Spectra are scaled by ``1/sum(w)`` so
that a full-scale sinusoid has magnitude 0.5 at its bin; this keeps absolute
spectra of normalized waveforms inside ``[0, 1]``, which the training loss
relies on when it clips.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 16000
FRAME_LEN = 512
HOP = 256
N_BINS = FRAME_LEN // 2 + 1

LPS_FLOOR = 1e-12

N_BANDS = 15
LOWEST_CENTER_HZ = 150.0

FEATURE_MAGIC = b"GSE1"

WINDOW = get_window("hann", FRAME_LEN, fftbins=True)
WINDOW.setflags(write=False)
_WINDOW_SUM = float(WINDOW.sum())


class AudioFormatError(ValueError):
    """Raised for WAV files that are not 16 kHz mono PCM16."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected a 1-D signal, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(
                f"unsupported format: sample rate {self.sample_rate} Hz (need {SAMPLE_RATE})"
            )
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT, ``bins`` has shape (257, M)."""

    bins: np.ndarray
    frame_len: int = FRAME_LEN
    hop: int = HOP

    @property
    def n_frames(self):
        return self.bins.shape[1]

    @property
    def magnitude(self):
        return np.abs(self.bins)

    def select_frames(self, index):
        return Spectrogram(self.bins[:, index], self.frame_len, self.hop)


def n_frames_for(n_samples, frame_len=FRAME_LEN, hop=HOP):
    if n_samples < frame_len:
        return 0
    return 1 + (n_samples - frame_len) // hop


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path):
    """Read a 16 kHz mono PCM16 WAV file, scaling samples by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"unsupported format: {path}: {exc}") from exc
    if channels != 1 or width != 2 or rate != SAMPLE_RATE:
        raise AudioFormatError(
            f"unsupported format: {path} has {channels} channel(s), "
            f"{8 * width}-bit samples at {rate} Hz; need mono PCM16 at {SAMPLE_RATE} Hz"
        )
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0)


def write_wav(path, waveform):
    samples = waveform.samples if isinstance(waveform, Waveform) else np.asarray(waveform)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


def _frames(samples, frame_len, hop):
    m = n_frames_for(len(samples), frame_len, hop)
    view = np.lib.stride_tricks.sliding_window_view(samples, frame_len)
    return view[: (m - 1) * hop + 1 : hop]


def stft(w):
    """Frame, window and transform; the trailing partial frame is dropped."""
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(samples) < FRAME_LEN:
        raise ValueError(
            f"signal of {len(samples)} samples is shorter than one frame ({FRAME_LEN})"
        )
    frames = _frames(samples, FRAME_LEN, HOP) * WINDOW
    bins = np.fft.rfft(frames, axis=1).T / _WINDOW_SUM
    return Spectrogram(np.ascontiguousarray(bins))


def istft(s):
    """Weighted overlap-add inverse of :func:`stft`.

    Exact on every sample covered by two frames.  Inside the first and last
    half-frame only one window contributes and the output tapers.
    """
    bins = s.bins if isinstance(s, Spectrogram) else np.asarray(s)
    if bins.ndim != 2 or bins.shape[0] != N_BINS:
        raise ValueError(f"expected ({N_BINS}, M) bins, got {bins.shape}")
    if isinstance(s, Spectrogram) and s.hop * 2 != s.frame_len:
        raise ValueError("istft requires hop == frame_len / 2")
    m = bins.shape[1]
    n = (m - 1) * HOP + FRAME_LEN if m else 0
    frames = np.fft.irfft(bins.T * _WINDOW_SUM, n=FRAME_LEN, axis=1) * WINDOW
    out = np.zeros(n)
    norm = np.zeros(n)
    w2 = WINDOW**2
    for i in range(m):
        out[i * HOP : i * HOP + FRAME_LEN] += frames[i]
        norm[i * HOP : i * HOP + FRAME_LEN] += w2
    # interior sum of squared Hann windows at 50% overlap never drops below 0.5
    return Waveform(out / np.maximum(norm, 0.5))


# ---------------------------------------------------------------------------
# Log-power spectrum
# ---------------------------------------------------------------------------


def lps(s, floor=LPS_FLOOR):
    """Natural log of the floored power spectrum, shape (257, M)."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    bins = s.bins if isinstance(s, Spectrogram) else np.asarray(s)
    return np.log(np.maximum(np.abs(bins) ** 2, floor))


def lps_to_abs(values):
    """Magnitude spectrum from LPS, ``exp(values / 2)``."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("LPS values must be finite")
    return np.exp(values / 2.0)


def normalize_lps(values, stats):
    mean, std = _check_stats(stats)
    return (np.asarray(values) - mean[:, None]) / std[:, None]


def denormalize_lps(values, stats):
    mean, std = _check_stats(stats)
    return np.asarray(values) * std[:, None] + mean[:, None]


def _check_stats(stats):
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("normalization std must be strictly positive")
    return mean, std


# ---------------------------------------------------------------------------
# One-third octave bands
# ---------------------------------------------------------------------------


def octave_band_edges(n_bands=N_BANDS, lowest_center=LOWEST_CENTER_HZ):
    """Inclusive (lower, upper) bin index per band.

    Band ``j`` is centred on ``lowest_center * 2**(j/3)`` Hz with edges a
    sixth of an octave either side; each edge snaps to the nearest bin and the
    upper edge is exclusive, so neighbouring bands tile without overlap.
    """
    freqs = np.arange(N_BINS) * SAMPLE_RATE / FRAME_LEN
    j = np.arange(n_bands)
    low_hz = lowest_center * 2.0 ** ((2 * j - 1) / 6)
    high_hz = lowest_center * 2.0 ** ((2 * j + 1) / 6)
    lo = np.argmin(np.abs(freqs[None, :] - low_hz[:, None]), axis=1)
    hi = np.argmin(np.abs(freqs[None, :] - high_hz[:, None]), axis=1) - 1
    return np.stack([lo, hi], axis=1)


def octave_band_matrix(n_bands=N_BANDS):
    """0/1 matrix of shape (J, 257) summing bins into bands."""
    edges = octave_band_edges(n_bands)
    mat = np.zeros((n_bands, N_BINS))
    for j, (lo, hi) in enumerate(edges):
        mat[j, lo : hi + 1] = 1.0
    return mat


BAND_MATRIX = octave_band_matrix()
BAND_MATRIX.setflags(write=False)


def octave_bands(abs_stft):
    """Band magnitudes ``sqrt(sum_k |S(k, m)|^2)``, shape (J, M)."""
    abs_stft = np.asarray(abs_stft, dtype=np.float64)
    if np.any(abs_stft < 0):
        raise ValueError("octave_bands expects non-negative magnitudes")
    return np.sqrt(BAND_MATRIX @ abs_stft**2)


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------


def write_features(path, matrix):
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    if matrix.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *matrix.shape))
        fh.write(matrix.tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    f, m = struct.unpack_from("<II", blob, 4)
    data = np.frombuffer(blob, dtype="<f8", offset=12)
    if data.size != f * m:
        raise ValueError(f"{path}: truncated feature cache ({data.size} of {f * m} values)")
    return data.reshape(f, m).astype(np.float64)
