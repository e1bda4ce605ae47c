"""Corpus preparation: SNR mixing, manifests, features, statistics, slicing."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import (
    N_BINS,
    Waveform,
    denormalize_lps,
    lps,
    normalize_lps,
    read_features,
    read_wav,
    stft,
    write_features,
)
from .loss import BIN_FLOOR, MIN_ACTIVE, THETA, FrameMask, silence_mask

PEAK_LIMIT = 0.999
STD_FLOOR = 1e-8
STATS_MAGIC = b"GSEN"
SAMPLE_LEN = 40
SPLITS = ("train", "valid", "test")


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mixture:
    """Noisy mixture with its scaled components.

    ``speech`` and ``noise`` include the peak-normalisation factor ``scale``
    so ``noisy == speech + noise`` exactly; ``speech`` is the clean target.
    """

    noisy: Waveform
    speech: Waveform
    noise: Waveform
    gain: float
    scale: float
    offset: int


def noise_gain(speech_power, noise_power, snr_db):
    return float(np.sqrt(speech_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(speech, noise, snr_db, seed=0, peak_limit=PEAK_LIMIT):
    """Add a randomly offset noise segment at ``snr_db`` below the speech.

    Powers are mean squares over the whole utterance.  The noise wraps
    around when the offset runs past its end.  If the mixture peaks above
    ``peak_limit`` everything is scaled down by the same factor.
    """
    s = speech.samples if isinstance(speech, Waveform) else np.asarray(speech, dtype=np.float64)
    n = noise.samples if isinstance(noise, Waveform) else np.asarray(noise, dtype=np.float64)
    if len(n) == 0:
        raise ValueError("empty noise signal")
    offset = int(np.random.default_rng(seed).integers(len(n)))
    segment = np.take(n, np.arange(offset, offset + len(s)), mode="wrap")
    p_s = float(np.mean(s**2))
    p_n = float(np.mean(segment**2))
    if p_s <= 0:
        raise ValueError("speech has zero power")
    if p_n <= 0:
        raise ValueError("noise has zero power")
    gain = noise_gain(p_s, p_n, snr_db)
    scaled_noise = gain * segment
    noisy = s + scaled_noise
    peak = float(np.max(np.abs(noisy)))
    scale = peak_limit / peak if peak > peak_limit else 1.0
    return Mixture(
        Waveform(noisy * scale),
        Waveform(s * scale),
        Waveform(scaled_noise * scale),
        gain,
        scale,
        offset,
    )


def realized_snr(mixture):
    return 10.0 * np.log10(
        np.mean(mixture.speech.samples**2) / np.mean(mixture.noise.samples**2)
    )


# ---------------------------------------------------------------------------
# normalisation statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    n_frames: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise ValueError("normalization std must be strictly positive")


def compute_norm_stats(clean_corpus):
    """Per-bin mean and standard deviation over every frame of the corpus.

    ``clean_corpus`` is an iterable of (257, M) LPS matrices.  Utterances are
    merged one at a time with the pairwise update of Chan et al., so the
    corpus never has to be held in memory at once.
    """
    count = 0
    mean = None
    m2 = None
    for mat in clean_corpus:
        mat = np.asarray(mat, dtype=np.float64)
        n_b = mat.shape[1]
        if n_b == 0:
            continue
        mean_b = mat.mean(axis=1)
        m2_b = ((mat - mean_b[:, None]) ** 2).sum(axis=1)
        if count == 0:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta**2 * (count * n_b / total)
        count = total
    if count == 0:
        raise ValueError("empty corpus: no frames to compute statistics from")
    if count < 2:
        raise ValueError("need at least 2 frames to compute statistics")
    std = np.maximum(np.sqrt(m2 / count), STD_FLOOR)
    return NormStats(mean, std, count)


def write_stats(path, stats):
    with open(path, "wb") as fh:
        fh.write(STATS_MAGIC)
        fh.write(np.ascontiguousarray(stats.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(stats.std, dtype="<f8").tobytes())


def read_stats(path):
    blob = Path(path).read_bytes()
    if blob[:4] != STATS_MAGIC:
        raise ValueError(f"{path}: not a statistics file")
    values = np.frombuffer(blob, dtype="<f8", offset=4)
    if values.size != 2 * N_BINS:
        raise ValueError(f"{path}: expected {2 * N_BINS} values, found {values.size}")
    return NormStats(values[:N_BINS].copy(), values[N_BINS:].copy())


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSample:
    noisy: np.ndarray
    clean: np.ndarray
    mask: FrameMask
    source: str = ""
    offset: int = 0


def clean_magnitude(clean_lps_norm, stats):
    """Clipped magnitude spectrum of normalised clean LPS (as the loss sees it)."""
    return np.minimum(np.exp(denormalize_lps(clean_lps_norm, stats) / 2.0), 1.0)


def window_starts(n_frames, length=SAMPLE_LEN, overlap=0.5):
    hop = max(1, int(round(length * (1.0 - overlap))))
    if n_frames < length:
        return []
    return list(range(0, n_frames - length + 1, hop))


def slice_samples(
    noisy_lps,
    clean_lps,
    stats,
    length=SAMPLE_LEN,
    overlap=0.5,
    theta=THETA,
    bin_floor=BIN_FLOOR,
    min_active=MIN_ACTIVE,
    source="",
):
    """Cut an utterance into overlapping normalised samples.

    Inputs are raw (unnormalised) LPS matrices.  Samples whose clean frames
    have fewer than ``min_active`` active frames are dropped.
    """
    if noisy_lps.shape != clean_lps.shape:
        raise ValueError(f"shape mismatch {noisy_lps.shape} vs {clean_lps.shape}")
    noisy_n = normalize_lps(noisy_lps, stats)
    clean_n = normalize_lps(clean_lps, stats)
    active = np.sum(clean_magnitude(clean_n, stats) > bin_floor, axis=0) > theta
    out = []
    for start in window_starts(clean_lps.shape[1], length, overlap):
        if active[start : start + length].sum() < min_active:
            continue
        clean_s = clean_n[:, start : start + length]
        mask = silence_mask(clean_magnitude(clean_s, stats), theta, bin_floor)
        out.append(
            TrainingSample(noisy_n[:, start : start + length], clean_s, mask, source, start)
        )
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    utt_id: str
    speech_path: str
    noise_path: str
    snr_db: float
    split: str

    @property
    def speaker(self):
        return Path(self.speech_path).parent.name

    @property
    def noise_name(self):
        return Path(self.noise_path).stem

    @property
    def mix_seed(self):
        return zlib.crc32(self.utt_id.encode("utf-8"))


def _wavs(directory):
    return sorted(p for p in Path(directory).glob("*.wav") if p.is_file())


def _speakers(speech_dir, split):
    root = Path(speech_dir) / split
    if not root.is_dir():
        return {}
    return {d.name: _wavs(d) for d in sorted(root.iterdir()) if d.is_dir() and _wavs(d)}


def build_manifest(speech_dir, noise_dir, snrs, splits=None, seed=0):
    """Assign a noise file to every (utterance, SNR) pair.

    Expects ``speech_dir/<split>/<speaker>/*.wav`` and
    ``noise_dir/<split>/*.wav``.  Speakers must not appear in more than one
    split.  The assignment is drawn from ``seed`` and is reproducible.  By
    default every split directory that exists is included.
    """
    by_split = {split: _speakers(speech_dir, split) for split in SPLITS}
    if splits is None:
        splits = [s for s in SPLITS if by_split[s]]
        if not splits:
            raise ValueError(f"no speech found under {speech_dir}")
    elif isinstance(splits, str):
        splits = (splits,)
    seen = {}
    for split, speakers in by_split.items():
        for spk in speakers:
            if spk in seen:
                raise ValueError(
                    f"speaker {spk!r} appears in both {seen[spk]!r} and {split!r} splits"
                )
            seen[spk] = split
    rng = np.random.default_rng(seed)
    records = []
    for split in splits:
        speakers = by_split.get(split, {})
        noises = _wavs(Path(noise_dir) / split)
        if not speakers:
            raise ValueError(f"no speech found under {Path(speech_dir) / split}")
        if not noises:
            raise ValueError(f"no noise found under {Path(noise_dir) / split}")
        for spk, files in speakers.items():
            for wav in files:
                for snr in snrs:
                    noise = noises[int(rng.integers(len(noises)))]
                    utt_id = f"{spk}_{wav.stem}_{_snr_tag(snr)}"
                    records.append(
                        ManifestRecord(utt_id, str(wav), str(noise), float(snr), split)
                    )
    return records


def _snr_tag(snr):
    snr = float(snr)
    text = f"{abs(snr):g}".replace(".", "p")
    return f"snr{'m' if snr < 0 else 'p'}{text}"


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.utt_id}\t{r.speech_path}\t{r.noise_path}\t{r.snr_db:g}\t{r.split}\n")


def read_manifest(path, split=None):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            rec = ManifestRecord(fields[0], fields[1], fields[2], float(fields[3]), fields[4])
            if split is None or rec.split == split:
                records.append(rec)
    return records


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def mix_record(record, noise_cache=None):
    noise_cache = {} if noise_cache is None else noise_cache
    if record.noise_path not in noise_cache:
        noise_cache[record.noise_path] = read_wav(record.noise_path)
    return mix_at_snr(
        read_wav(record.speech_path),
        noise_cache[record.noise_path],
        record.snr_db,
        seed=record.mix_seed,
    )


def feature_paths(feature_dir, utt_id):
    root = Path(feature_dir)
    return root / f"{utt_id}.noisy.gse", root / f"{utt_id}.clean.gse"


def featurize(records, feature_dir):
    """Mix every record and cache noisy/clean LPS; returns the number written."""
    Path(feature_dir).mkdir(parents=True, exist_ok=True)
    noise_cache = {}
    for rec in records:
        mix = mix_record(rec, noise_cache)
        noisy_path, clean_path = feature_paths(feature_dir, rec.utt_id)
        write_features(noisy_path, lps(stft(mix.noisy)))
        write_features(clean_path, lps(stft(mix.speech)))
    return len(records)


def load_features(feature_dir, record):
    noisy_path, clean_path = feature_paths(feature_dir, record.utt_id)
    return read_features(noisy_path), read_features(clean_path)


def stats_from_features(feature_dir, records):
    return compute_norm_stats(load_features(feature_dir, r)[1] for r in records)


def load_samples(feature_dir, records, stats, **kwargs):
    samples = []
    for rec in records:
        noisy, clean = load_features(feature_dir, rec)
        samples.extend(slice_samples(noisy, clean, stats, source=rec.utt_id, **kwargs))
    return samples


def stack_batch(samples):
    """Arrays ([B, 1, 257, T] noisy, [B, 257, T] clean) for a list of samples."""
    noisy = np.stack([s.noisy for s in samples])[:, None]
    clean = np.stack([s.clean for s in samples])
    return noisy, clean

