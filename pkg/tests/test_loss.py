from types import SimpleNamespace

import numpy as np
import pytest

from freqgate import autodiff as ad
from freqgate.audio import N_BINS, octave_band_edges
from freqgate.loss import (
    FrameMask,
    SampleRejected,
    batch_loss,
    clip01,
    e2stoi_loss,
    masked_normalize,
    mse_loss,
    silence_mask,
)

# identity normalisation: the "normalised" LPS is the raw LPS
UNIT = SimpleNamespace(mean=np.zeros(N_BINS), std=np.ones(N_BINS))
SILENT_LPS = np.log(1e-8)  # magnitude 1e-4, below the 1e-3 floor


def speechlike(frames, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-9.0, -1.0, (N_BINS, frames))


def with_active(n_active, frames=40, seed=0):
    x = np.full((N_BINS, frames), SILENT_LPS)
    cols = np.sort(np.random.default_rng(seed).choice(frames, n_active, replace=False))
    x[:, cols] = speechlike(n_active, seed + 1)
    return x


def reference_d(clean_lps, enh_lps, kept):
    """Band correlation written with explicit loops."""
    edges = octave_band_edges()

    def bands(lps):
        mag = np.minimum(np.exp(lps / 2.0), 1.0)
        out = np.zeros((len(edges), len(kept)))
        for j, (lo, hi) in enumerate(edges):
            for col, m in enumerate(kept):
                out[j, col] = np.sqrt(np.sum(mag[lo : hi + 1, m] ** 2) + 1e-12)
        return out

    def normalize(b):
        b = b.copy()
        for j in range(b.shape[0]):
            b[j] -= b[j].mean()
            b[j] /= np.sqrt(np.sum(b[j] ** 2) + 1e-20)
        for k in range(b.shape[1]):
            b[:, k] -= b[:, k].mean()
            b[:, k] /= np.sqrt(np.sum(b[:, k] ** 2) + 1e-20)
        return b

    a, b = normalize(bands(clean_lps)), normalize(bands(enh_lps))
    return np.trace(a.T @ b) / len(kept)


class TestSilenceMask:
    def test_counts_bins_above_floor(self):
        mag = np.full((N_BINS, 4), 1e-4)
        mag[5, 1] = 2e-3
        mag[:, 3] = 0.5
        assert silence_mask(mag).kept.tolist() == [1, 3]

    def test_theta_threshold(self):
        mag = np.full((N_BINS, 3), 1e-4)
        mag[:3, 0] = 1.0
        mag[:4, 1] = 1.0
        assert silence_mask(mag, theta=3).kept.tolist() == [1]

    def test_bad_theta(self):
        with pytest.raises(ValueError):
            silence_mask(np.ones((N_BINS, 2)), theta=-1)

    def test_frame_mask_order(self):
        with pytest.raises(ValueError):
            FrameMask([3, 1])
        assert FrameMask([0, 2, 5]).L == 3


class TestClip:
    def test_values_and_gradient(self):
        x = ad.Tensor(np.array([0.2, 0.9, 1.5, 3.0]), requires_grad=True)
        y = clip01(x)
        assert y.data.tolist() == [0.2, 0.9, 1.0, 1.0]
        ad.sum_(y).backward()
        assert x.grad.tolist() == [1.0, 1.0, 0.0, 0.0]


class TestLossSemantics:
    def test_clean_vs_clean(self):
        clean = speechlike(40)
        res = e2stoi_loss(clean, clean, UNIT)
        assert res.total_value == pytest.approx(-1.0, abs=1e-9)
        assert res.d_e2stoi == pytest.approx(1.0, abs=1e-9)
        assert res.mse == 0.0

    def test_nine_active_rejected(self):
        clean = with_active(9)
        with pytest.raises(SampleRejected) as info:
            e2stoi_loss(speechlike(40, 5), clean, UNIT)
        assert info.value.n_active == 9

    def test_ten_active_accepted(self):
        res = e2stoi_loss(speechlike(40, 5), with_active(10), UNIT)
        assert np.isfinite(res.total_value)

    def test_matches_loop_reference(self):
        clean, enh = with_active(25, seed=3), speechlike(40, 7)
        kept = silence_mask(np.minimum(np.exp(clean / 2), 1.0)).kept
        res = e2stoi_loss(enh, clean, UNIT)
        assert res.d_e2stoi == pytest.approx(reference_d(clean, enh, kept), abs=1e-12)

    def test_uses_stats(self):
        rng = np.random.default_rng(8)
        stats = SimpleNamespace(mean=rng.uniform(-6, -2, N_BINS), std=rng.uniform(0.5, 2, N_BINS))
        clean_raw, enh_raw = speechlike(30, 1), speechlike(30, 2)
        norm = lambda x: (x - stats.mean[:, None]) / stats.std[:, None]  # noqa: E731
        res = e2stoi_loss(norm(enh_raw), norm(clean_raw), stats)
        kept = np.arange(30)
        assert res.d_e2stoi == pytest.approx(reference_d(clean_raw, enh_raw, kept), abs=1e-12)
        assert res.mse == pytest.approx(np.mean((norm(enh_raw) - norm(clean_raw)) ** 2), rel=1e-12)

    def test_level_blind_correlation(self):
        # a constant LPS offset scales every magnitude and leaves d alone
        clean, enh = speechlike(30, 1), speechlike(30, 2) - 3.0
        base = e2stoi_loss(enh, clean, UNIT)
        moved = e2stoi_loss(enh - 2.0, clean, UNIT)
        assert moved.d_e2stoi == pytest.approx(base.d_e2stoi, abs=1e-9)
        assert moved.mse != pytest.approx(base.mse)

    def test_lambda_weighting(self):
        clean, enh = speechlike(20, 1), speechlike(20, 2)
        res = e2stoi_loss(enh, clean, UNIT, lam=0.5, min_active=5)
        assert res.total_value == pytest.approx(-res.d_e2stoi + 0.5 * res.mse, abs=1e-12)

    def test_bounded_random(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            clean = rng.uniform(-12, 2, (N_BINS, 12))
            enh = rng.uniform(-12, 2, (N_BINS, 12))
            d = e2stoi_loss(enh, clean, UNIT, min_active=2).d_e2stoi
            assert -1.0 <= d <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            e2stoi_loss(speechlike(10), speechlike(11), UNIT)

    def test_normalize_needs_two_frames(self):
        with pytest.raises(ValueError):
            masked_normalize(np.ones((15, 1)))


class TestLossGradient:
    def test_finite_differences(self):
        clean = with_active(10, frames=12, seed=4)
        enh = ad.Tensor(np.random.default_rng(6).uniform(-7.0, 0.0, (N_BINS, 12)), requires_grad=True)
        # the MSE and correlation terms nearly cancel on a few bins, leaving
        # gradients near 1e-6 that a smaller step resolves only to roundoff
        err = ad.grad_check(lambda e: e2stoi_loss(e, clean, UNIT).total, [enh], eps=1e-4)
        assert err < 1e-4

    def test_clipped_bins_get_no_correlation_gradient(self):
        clean = speechlike(12, 1)
        enh_data = speechlike(12, 2)
        enh_data[40] = 3.0  # magnitude exp(1.5) > 1, clipped
        enh = ad.Tensor(enh_data, requires_grad=True)
        e2stoi_loss(enh, clean, UNIT, lam=0.0, min_active=2).total.backward()
        assert np.all(enh.grad[40] == 0)
        assert np.any(enh.grad[41] != 0)


class TestBatchLoss:
    def test_mean_of_samples(self):
        clean = np.stack([speechlike(15, s) for s in (1, 2)])
        enh = np.stack([speechlike(15, s) for s in (3, 4)])[:, None]
        total, d, mse = batch_loss(ad.Tensor(enh), clean, UNIT, min_active=5)
        singles = [e2stoi_loss(enh[i, 0], clean[i], UNIT, min_active=5) for i in range(2)]
        assert float(total.data) == pytest.approx(np.mean([s.total_value for s in singles]), abs=1e-12)
        assert d == pytest.approx(np.mean([s.d_e2stoi for s in singles]), abs=1e-12)
        assert mse == pytest.approx(np.mean([s.mse for s in singles]), abs=1e-12)

    def test_mse_kind(self):
        clean = speechlike(6, 1)[None]
        enh = ad.Tensor(speechlike(6, 2)[None, None])
        total, d, mse = batch_loss(enh, clean, UNIT, kind="mse")
        assert np.isnan(d)
        assert float(total.data) == pytest.approx(mse)
        assert mse_loss(enh[0, 0], clean[0]).mse == pytest.approx(mse)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            batch_loss(ad.Tensor(np.zeros((1, 1, N_BINS, 3))), np.zeros((1, N_BINS, 3)), UNIT, kind="l1")
