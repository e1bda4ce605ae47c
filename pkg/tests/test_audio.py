import wave

import numpy as np
import pytest

from freqgate import autodiff as ad
from freqgate.audio import (
    BAND_MATRIX,
    FRAME_LEN,
    HOP,
    N_BANDS,
    N_BINS,
    AudioFormatError,
    Spectrogram,
    Waveform,
    denormalize_lps,
    istft,
    lps,
    lps_to_abs,
    n_frames_for,
    normalize_lps,
    octave_band_edges,
    octave_bands,
    read_features,
    read_wav,
    stft,
    write_features,
    write_wav,
)
from freqgate.data import NormStats


def _write_pcm(path, pcm, rate=16000, channels=1):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(np.asarray(pcm, dtype="<i2").tobytes())


class TestWav:
    def test_zeros(self, tmp_path):
        _write_pcm(tmp_path / "z.wav", np.zeros(16000))
        w = read_wav(tmp_path / "z.wav")
        assert len(w) == 16000
        assert np.all(w.samples == 0)

    def test_scaling(self, tmp_path):
        _write_pcm(tmp_path / "h.wav", [16384, -32768, 0])
        assert read_wav(tmp_path / "h.wav").samples.tolist() == [0.5, -1.0, 0.0]

    def test_rejects_stereo_44k(self, tmp_path):
        _write_pcm(tmp_path / "s.wav", np.zeros(200), rate=44100, channels=2)
        with pytest.raises(AudioFormatError, match="unsupported format"):
            read_wav(tmp_path / "s.wav")

    def test_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).integers(-32768, 32767, 1000) / 32768.0
        write_wav(tmp_path / "r.wav", Waveform(x))
        np.testing.assert_array_equal(read_wav(tmp_path / "r.wav").samples, x)

    def test_waveform_rejects_nan(self):
        with pytest.raises(ValueError):
            Waveform(np.array([0.0, np.nan]))


class TestStft:
    def test_zeros_single_frame(self):
        s = stft(Waveform(np.zeros(512)))
        assert s.bins.shape == (N_BINS, 1)
        assert np.all(s.bins == 0)

    def test_frame_count(self):
        assert stft(Waveform(np.zeros(1280))).n_frames == 4

    def test_frame_count_random_lengths(self):
        rng = np.random.default_rng(1)
        for n in rng.integers(512, 20000, 30):
            m = stft(Waveform(np.zeros(n))).n_frames
            assert m == 1 + (n - 512) // 256 == n_frames_for(n)

    def test_sine_peak(self):
        t = np.arange(16000) / 16000
        mag = stft(Waveform(np.sin(2 * np.pi * 1000 * t))).magnitude
        assert np.all(np.argmax(mag, axis=0) == 32)

    def test_sine_peak_height(self):
        # a Hann-windowed sine on a bin centre reaches A/2 after 1/sum(w) scaling
        t = np.arange(4096) / 16000
        mag = stft(Waveform(0.8 * np.sin(2 * np.pi * 1000 * t))).magnitude
        np.testing.assert_allclose(mag[32], 0.4, rtol=1e-9)

    def test_short_signal(self):
        with pytest.raises(ValueError):
            stft(Waveform(np.zeros(511)))


class TestIstft:
    def test_roundtrip_interior(self):
        x = np.random.default_rng(2).uniform(-1, 1, 16000)
        y = istft(stft(Waveform(x))).samples
        inner = slice(HOP, len(y) - HOP)
        assert np.max(np.abs(y[inner] - x[: len(y)][inner])) < 1e-6

    def test_zero(self):
        y = istft(Spectrogram(np.zeros((N_BINS, 5), dtype=complex)))
        assert len(y) == 4 * HOP + FRAME_LEN
        assert np.all(y.samples == 0)

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            istft(np.zeros((100, 3)))


class TestLps:
    def test_unit_magnitude(self):
        assert lps(np.ones((N_BINS, 1)))[0, 0] == 0.0

    def test_floor(self):
        assert lps(np.zeros((N_BINS, 1)))[0, 0] == pytest.approx(-27.631021115928547)

    def test_inverse(self):
        mag = np.random.default_rng(3).uniform(1e-5, 2, (N_BINS, 4))
        np.testing.assert_allclose(lps_to_abs(lps(mag)), mag, rtol=1e-12)

    def test_lps_to_abs_values(self):
        assert lps_to_abs(np.array([0.0, np.log(4)])).tolist() == pytest.approx([1.0, 2.0])

    def test_lps_to_abs_gradient(self):
        # exp(x/2) through the engine matches its derivative
        x = ad.Tensor(np.random.default_rng(4).normal(size=6))
        err = ad.grad_check(lambda t: ad.sum_(ad.exp(ad.scale(t, 0.5))), [x], eps=1e-6)
        assert err < 1e-6

    def test_bad_floor(self):
        with pytest.raises(ValueError):
            lps(np.ones((N_BINS, 1)), floor=0)


class TestNormalization:
    def test_identity_stats(self):
        x = np.random.default_rng(5).normal(size=(N_BINS, 3))
        stats = NormStats(np.zeros(N_BINS), np.ones(N_BINS))
        np.testing.assert_array_equal(normalize_lps(x, stats), x)

    def test_roundtrip(self):
        rng = np.random.default_rng(6)
        x = rng.normal(-10, 4, (N_BINS, 20))
        stats = NormStats(rng.normal(size=N_BINS), rng.uniform(0.5, 3, N_BINS))
        np.testing.assert_allclose(denormalize_lps(normalize_lps(x, stats), stats), x, atol=1e-12)

    def test_constant_column(self):
        stats = NormStats(np.full(N_BINS, 7.0), np.ones(N_BINS))
        assert np.all(normalize_lps(np.full((N_BINS, 1), 7.0), stats) == 0)

    def test_bad_std(self):
        class Raw:
            mean = np.zeros(N_BINS)
            std = np.zeros(N_BINS)

        with pytest.raises(ValueError):
            normalize_lps(np.zeros((N_BINS, 1)), Raw())


class TestOctaveBands:
    def test_table_against_center_rule(self):
        # independent recomputation: centres 150*2^(j/3) Hz, +-1/6 octave,
        # nearest bin at 31.25 Hz spacing, upper edge exclusive
        bin_hz = 16000 / 512
        expected = []
        for j in range(15):
            centre = 150.0 * 2 ** (j / 3)
            lo = int(round(centre * 2 ** (-1 / 6) / bin_hz))
            hi = int(round(centre * 2 ** (1 / 6) / bin_hz)) - 1
            expected.append([lo, hi])
        assert octave_band_edges().tolist() == expected

    def test_table_properties(self):
        edges = octave_band_edges()
        assert len(edges) == N_BANDS
        assert np.all(edges[:, 0] <= edges[:, 1])
        assert np.all(edges[1:, 0] > edges[:-1, 1])
        assert edges.max() <= 256

    def test_three_four_five(self):
        lo, hi = octave_band_edges()[2]
        assert hi - lo == 1
        x = np.zeros((N_BINS, 1))
        x[lo], x[hi] = 3.0, 4.0
        assert octave_bands(x)[2, 0] == 5.0

    def test_zero_frame(self):
        assert np.all(octave_bands(np.zeros((N_BINS, 2))) == 0)

    def test_homogeneous(self):
        x = np.random.default_rng(7).uniform(0, 1, (N_BINS, 5))
        np.testing.assert_allclose(octave_bands(2.5 * x), 2.5 * octave_bands(x), rtol=1e-13)

    def test_band_matrix_readonly(self):
        with pytest.raises(ValueError):
            BAND_MATRIX[0, 0] = 2.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            octave_bands(-np.ones((N_BINS, 1)))


class TestFeatureCache:
    def test_roundtrip_layout(self, tmp_path):
        x = np.arange(N_BINS * 3, dtype=float).reshape(N_BINS, 3)
        write_features(tmp_path / "f.gse", x)
        blob = (tmp_path / "f.gse").read_bytes()
        assert blob[:4] == b"GSE1"
        assert np.frombuffer(blob[4:12], "<u4").tolist() == [N_BINS, 3]
        # frequency-major: the first row comes first
        assert np.frombuffer(blob[12:36], "<f8").tolist() == [0.0, 1.0, 2.0]
        np.testing.assert_array_equal(read_features(tmp_path / "f.gse"), x)

    def test_truncated(self, tmp_path):
        write_features(tmp_path / "f.gse", np.ones((N_BINS, 2)))
        (tmp_path / "f.gse").write_bytes((tmp_path / "f.gse").read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            read_features(tmp_path / "f.gse")
