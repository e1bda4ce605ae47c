"""Synthetic speech-like corpus for self-contained desk-scale runs.

"Speech" is a sequence of syllables: harmonic complexes on a gliding pitch
contour, shaped by three formant resonances and an attack/decay envelope,
with occasional unvoiced bursts of high-passed noise and pauses between
words.  Each speaker has their own pitch range and formant scaling.
Interferers are stationary or slowly modulated coloured noises; the train
and test noise families are disjoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import SAMPLE_RATE, Waveform, write_wav

NYQUIST = SAMPLE_RATE / 2
VOWELS = (
    (730, 1090, 2440),
    (270, 2290, 3010),
    (530, 1840, 2480),
    (660, 1720, 2410),
    (300, 870, 2240),
    (640, 1190, 2390),
    (490, 1350, 1690),
)
TRAIN_NOISES = ("pink", "brown", "lowpass_white", "hum", "pulsing_pink")
TEST_NOISES = ("rumble", "hiss", "notched_pink")


@dataclass(frozen=True)
class Speaker:
    name: str
    f0: float
    formant_scale: float


def make_speaker(name, rng):
    return Speaker(name, float(rng.uniform(95.0, 230.0)), float(rng.uniform(0.88, 1.18)))


def _formant_gain(freqs, formants, bandwidths):
    gain = np.zeros_like(freqs)
    for f, bw in zip(formants, bandwidths):
        gain += 1.0 / (1.0 + ((freqs - f) / (bw / 2.0)) ** 2)
    return gain * (1.0 / (1.0 + freqs / 2000.0))


def _syllable(speaker, rng, n):
    t = np.arange(n) / SAMPLE_RATE
    f0 = speaker.f0 * rng.uniform(0.9, 1.1)
    contour = f0 * (1.0 + rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(contour) / SAMPLE_RATE
    formants = np.array(VOWELS[rng.integers(len(VOWELS))]) * speaker.formant_scale
    bandwidths = rng.uniform(70.0, 160.0, size=3)
    n_harm = int(7600.0 // (f0 * 1.15))
    k = np.arange(1, n_harm + 1)
    amps = _formant_gain(k * f0, formants, bandwidths)
    signal = np.sin(np.outer(phase, k) + rng.uniform(0, 2 * np.pi, n_harm)) @ amps
    attack = max(1, int(0.02 * SAMPLE_RATE))
    env = np.ones(n)
    env[:attack] = np.linspace(0.0, 1.0, attack)
    env *= np.exp(-rng.uniform(0.5, 3.0) * t)
    env *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t)
    return signal * env


def _burst(rng, n):
    cutoff = rng.uniform(2500.0, 5000.0)
    sos = butter(4, cutoff / NYQUIST, btype="highpass", output="sos")
    noise = sosfilt(sos, rng.standard_normal(n))
    return noise * np.hanning(n) * rng.uniform(0.3, 0.8)


def synth_utterance(speaker, rng, duration=4.0, floor=1e-4):
    """A speech-like waveform of ``duration`` seconds peaking at 0.5..0.9."""
    total = int(duration * SAMPLE_RATE)
    out = np.zeros(total)
    pos = int(rng.uniform(0.1, 0.3) * SAMPLE_RATE)
    while pos < total - int(0.2 * SAMPLE_RATE):
        for _ in range(rng.integers(1, 4)):
            if rng.random() < 0.25:
                n = int(rng.uniform(0.06, 0.14) * SAMPLE_RATE)
                piece = _burst(rng, n)
            else:
                n = int(rng.uniform(0.12, 0.3) * SAMPLE_RATE)
                piece = _syllable(speaker, rng, n)
                piece /= np.max(np.abs(piece)) + 1e-12
            n = min(n, total - pos)
            out[pos : pos + n] += piece[:n] * rng.uniform(0.5, 1.0)
            pos += n + int(rng.uniform(0.01, 0.05) * SAMPLE_RATE)
            if pos >= total:
                break
        pos += int(rng.uniform(0.1, 0.4) * SAMPLE_RATE)
    out *= rng.uniform(0.5, 0.9) / (np.max(np.abs(out)) + 1e-12)
    return out + floor * rng.standard_normal(total)


def _colored(rng, n, exponent):
    """Gaussian noise with a 1/f**exponent power spectrum."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    f[0] = f[1]
    return np.fft.irfft(spec / f ** (exponent / 2.0), n=n)


def _modulate(rng, x, rate, depth):
    t = np.arange(len(x)) / SAMPLE_RATE
    return x * (1.0 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))


def synth_noise(kind, rng, duration=20.0):
    n = int(duration * SAMPLE_RATE)
    if kind == "pink":
        x = _colored(rng, n, 1.0)
    elif kind == "brown":
        x = _colored(rng, n, 2.0)
    elif kind == "lowpass_white":
        x = sosfilt(butter(6, 2000 / NYQUIST, output="sos"), rng.standard_normal(n))
    elif kind == "hum":
        t = np.arange(n) / SAMPLE_RATE
        x = sum(np.sin(2 * np.pi * 60.0 * k * t + rng.uniform(0, 6.3)) / k for k in range(1, 12))
        x = x / np.std(x) + 0.5 * _colored(rng, n, 1.0) / np.std(_colored(rng, n, 1.0))
    elif kind == "pulsing_pink":
        x = _modulate(rng, _colored(rng, n, 1.0), 4.0, 0.6)
    elif kind == "rumble":
        x = sosfilt(butter(4, 600 / NYQUIST, output="sos"), _colored(rng, n, 1.5))
        x = _modulate(rng, x, 0.5, 0.4)
    elif kind == "hiss":
        x = sosfilt(butter(4, 1500 / NYQUIST, btype="highpass", output="sos"), rng.standard_normal(n))
    elif kind == "notched_pink":
        x = _colored(rng, n, 1.0)
        x = sosfilt(butter(2, [800 / NYQUIST, 1600 / NYQUIST], btype="bandstop", output="sos"), x)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return 0.3 * x / np.max(np.abs(x))


@dataclass(frozen=True)
class CorpusLayout:
    speech_dir: Path
    noise_dir: Path
    train_seconds: float
    n_files: int


def synth_corpus(
    out_dir,
    seed=0,
    speakers=(30, 2, 3),
    utterances=10,
    duration=4.0,
    noise_duration=20.0,
):
    """Write ``speech/<split>/<speaker>/*.wav`` and ``noise/<split>/*.wav``.

    ``speakers`` gives the number of speakers in the train, valid and test
    splits; each speaker records ``utterances`` clips.  Valid reuses the
    train noise family, test gets its own.
    """
    rng = np.random.default_rng(seed)
    root = Path(out_dir)
    speech_dir, noise_dir = root / "speech", root / "noise"
    n_files = 0
    spk_index = 0
    for split, n_spk in zip(("train", "valid", "test"), speakers):
        per_speaker = utterances if split == "train" else max(1, utterances // 3)
        for _ in range(n_spk):
            spk = make_speaker(f"spk{spk_index:02d}", rng)
            spk_index += 1
            folder = speech_dir / split / spk.name
            folder.mkdir(parents=True, exist_ok=True)
            for u in range(per_speaker):
                wav = synth_utterance(spk, rng, duration)
                write_wav(folder / f"utt{u:02d}.wav", Waveform(wav))
                n_files += 1
    for split, kinds in (("train", TRAIN_NOISES), ("valid", TRAIN_NOISES[:2]), ("test", TEST_NOISES)):
        folder = noise_dir / split
        folder.mkdir(parents=True, exist_ok=True)
        for kind in kinds:
            write_wav(folder / f"{kind}.wav", Waveform(synth_noise(kind, rng, noise_duration)))
            n_files += 1
    train_seconds = speakers[0] * utterances * duration
    return CorpusLayout(speech_dir, noise_dir, train_seconds, n_files)
