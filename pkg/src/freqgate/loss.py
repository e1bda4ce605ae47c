"""Differentiable E2STOI training loss.

The enhanced and clean normalised LPS are mapped back to magnitude spectra,
clipped to ``[0, 1]`` and pooled into one-third octave bands.  Frames where
the clean spectrum is silent are masked out, the remaining band matrix is
normalised as a single segment (rows, then columns) and the mean column-wise
correlation ``d`` is formed.  The loss is ``-d + lam * mse`` where the MSE is
taken over all frames of the normalised LPS, which covers both the masked
frames and the overall level that ``d`` cannot see.

Silence detection reads Heaviside counts literally as "bins above
``bin_floor``": a frame is active when more than ``theta`` of its clipped
clean bins exceed ``bin_floor``.  Both knobs are configurable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .audio import BAND_MATRIX

THETA = 0.01
BIN_FLOOR = 1e-3
LAMBDA = 1.0 / 3.0
MIN_ACTIVE = 10
BAND_EPS = 1e-12
NORM_EPS = 1e-10


class SampleRejected(ValueError):
    """Too few active clean frames for the correlation term."""

    def __init__(self, n_active, min_active):
        self.n_active = n_active
        self.min_active = min_active
        super().__init__(f"sample rejected: {n_active} active frames, need {min_active}")


@dataclass(frozen=True)
class FrameMask:
    kept: np.ndarray

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=np.intp)
        if kept.ndim != 1 or np.any(np.diff(kept) <= 0):
            raise ValueError("mask indices must be strictly increasing")
        object.__setattr__(self, "kept", kept)

    @property
    def L(self):
        return len(self.kept)


@dataclass
class LossBreakdown:
    d_e2stoi: float
    mse: float
    lam: float
    total: ad.Tensor

    @property
    def total_value(self):
        return float(self.total.data)


def clip01(abs_stft):
    """``min(x, 1)``; the gradient is zero where the input saturates."""
    return ad.clamp(abs_stft, None, 1.0)


def silence_mask(clean_abs, theta=THETA, bin_floor=BIN_FLOOR):
    """Frames whose count of bins above ``bin_floor`` exceeds ``theta``."""
    if theta < 0:
        raise ValueError("theta must be non-negative")
    counts = np.sum(np.asarray(clean_abs) > bin_floor, axis=0)
    return FrameMask(np.flatnonzero(counts > theta))


def masked_octave(abs_stft, mask):
    """Band magnitudes of the kept frames, shape (J, L)."""
    if mask.L < 1:
        raise ValueError("empty frame mask")
    bands = ad.sqrt(ad.add(ad.matmul(BAND_MATRIX, ad.square(abs_stft)), BAND_EPS))
    return ad.take(bands, mask.kept, axis=1)


def _unit_center(x, axis):
    centered = ad.sub(x, ad.mean(x, axis=axis, keepdims=True))
    norm = ad.sqrt(ad.add(ad.sum_(ad.square(centered), axis=axis, keepdims=True), NORM_EPS**2))
    return ad.div(centered, norm)


def masked_normalize(bands):
    """Centre and unit-normalise rows over all kept frames, then columns."""
    bands = ad.as_tensor(bands)
    if bands.shape[1] < 2:
        raise ValueError(f"need at least 2 kept frames, got {bands.shape[1]}")
    return _unit_center(_unit_center(bands, 1), 0)


def d_e2stoi(clean_norm, enh_norm):
    """Mean over frames of the dot product of normalised columns."""
    clean_norm, enh_norm = ad.as_tensor(clean_norm), ad.as_tensor(enh_norm)
    if clean_norm.shape != enh_norm.shape:
        raise ValueError(f"shape mismatch {clean_norm.shape} vs {enh_norm.shape}")
    return ad.scale(ad.sum_(ad.mul(clean_norm, enh_norm)), 1.0 / clean_norm.shape[1])


def _stats_columns(stats):
    mean = np.asarray(stats.mean, dtype=np.float64).reshape(-1, 1)
    std = np.asarray(stats.std, dtype=np.float64).reshape(-1, 1)
    return mean, std


def e2stoi_loss(
    enh_lps_norm,
    clean_lps_norm,
    stats,
    theta=THETA,
    lam=LAMBDA,
    bin_floor=BIN_FLOOR,
    min_active=MIN_ACTIVE,
):
    """Loss for one (257, T) sample; differentiable in ``enh_lps_norm``.

    Raises :class:`SampleRejected` when the clean sample has fewer than
    ``min_active`` active frames.
    """
    enh = ad.as_tensor(enh_lps_norm)
    clean = np.asarray(clean_lps_norm.data if isinstance(clean_lps_norm, ad.Tensor) else clean_lps_norm)
    if enh.shape != clean.shape or enh.ndim != 2:
        raise ValueError(f"expected matching (257, T) inputs, got {enh.shape} and {clean.shape}")
    mean, std = _stats_columns(stats)

    clean_abs = np.minimum(np.exp((clean * std + mean) / 2.0), 1.0)
    mask = silence_mask(clean_abs, theta, bin_floor)
    if mask.L < max(min_active, 2):
        raise SampleRejected(mask.L, max(min_active, 2))

    enh_abs = clip01(ad.exp(ad.scale(ad.add(ad.mul(enh, std), mean), 0.5)))
    c_norm = masked_normalize(masked_octave(clean_abs, mask))
    e_norm = masked_normalize(masked_octave(enh_abs, mask))
    d = d_e2stoi(c_norm, e_norm)
    mse = ad.mse(enh, clean)
    total = ad.add(ad.scale(d, -1.0), ad.scale(mse, lam))
    return LossBreakdown(float(d.data), float(mse.data), lam, total)


def mse_loss(enh_lps_norm, clean_lps_norm):
    """Plain MSE in the normalised LPS domain, packaged like :func:`e2stoi_loss`."""
    mse = ad.mse(enh_lps_norm, clean_lps_norm)
    return LossBreakdown(float("nan"), float(mse.data), 1.0, mse)


def batch_loss(enhanced, clean, stats, kind="e2stoi", **kwargs):
    """Mean per-sample loss over a batch.

    ``enhanced`` is a [B, 1, 257, T] tensor, ``clean`` a [B, 257, T] array.
    Returns ``(total, mean_d, mean_mse)`` with ``total`` differentiable.
    """
    b = enhanced.shape[0]
    totals, ds, mses = [], [], []
    for i in range(b):
        enh_i = enhanced[i, 0]
        if kind == "e2stoi":
            res = e2stoi_loss(enh_i, clean[i], stats, **kwargs)
        elif kind == "mse":
            res = mse_loss(enh_i, clean[i])
        else:
            raise ValueError(f"unknown loss kind {kind!r}")
        totals.append(res.total)
        ds.append(res.d_e2stoi)
        mses.append(res.mse)
    total = ad.scale(ad.sum_(ad.stack(totals)), 1.0 / b)
    return total, float(np.mean(ds)), float(np.mean(mses))
