"""Extended short-time objective intelligibility (ESTOI) for evaluation.

This is the segment-based, non-differentiable reference measure.  Silent
frames are removed from both signals using the clean signal's frame energies,
the remaining frames are pooled into one-third octave bands and cut into
overlapping segments of ``N`` frames, and each segment is normalised row-wise
then column-wise before correlating clean against processed.
"""

from __future__ import annotations

import numpy as np

from .audio import Waveform, octave_bands, stft

SEGMENT_LEN = 30
SILENCE_DB = 40.0
NORM_EPS = 1e-10


class DegenerateSegmentError(ValueError):
    """A row or column has zero norm after centering (strict mode only)."""

    def __init__(self, axis, indices):
        self.axis = axis
        self.indices = indices
        super().__init__(f"zero-norm {axis}(s) after centering at indices {indices}")


class TooFewFramesError(ValueError):
    pass


def remove_silent_frames(clean, other, threshold_db=SILENCE_DB):
    """Drop frames whose clean energy is more than ``threshold_db`` below the peak.

    The same frames are dropped from ``other``.  Returns the two reduced
    spectrograms.
    """
    if clean.n_frames != other.n_frames:
        raise ValueError(
            f"frame counts differ: {clean.n_frames} vs {other.n_frames}"
        )
    keep = active_frames(clean.magnitude, threshold_db)
    if not keep.any():
        raise TooFewFramesError("all frames silent")
    return clean.select_frames(keep), other.select_frames(keep)


def active_frames(magnitude, threshold_db=SILENCE_DB):
    energy = np.sum(np.asarray(magnitude) ** 2, axis=0)
    peak = energy.max(initial=0.0)
    if peak <= 0:
        return np.zeros(energy.shape, dtype=bool)
    return (energy > 0) & (energy >= peak * 10.0 ** (-threshold_db / 10.0))


def _unit_center(x, axis, strict, eps, label):
    centered = x - x.mean(axis=axis, keepdims=True)
    norm = np.sqrt(np.sum(centered**2, axis=axis, keepdims=True))
    if strict:
        bad = np.argwhere(np.squeeze(norm, axis=axis) == 0)
        if len(bad):
            raise DegenerateSegmentError(label, [tuple(int(v) for v in b) for b in bad])
        return centered / norm
    # only exact-zero norms are guarded so that scaling stays an exact invariance
    return centered / np.where(norm == 0, eps, norm)


def row_col_normalize(seg, strict=False, eps=NORM_EPS):
    """Centre and L2-normalise rows, then columns, of ``(..., J, N)`` arrays.

    In strict mode an exact zero norm raises :class:`DegenerateSegmentError`;
    otherwise ``eps`` replaces the zero norm and the degenerate row or column
    comes out as zeros.
    """
    seg = np.asarray(seg, dtype=np.float64)
    rows = _unit_center(seg, -1, strict, eps, "row")
    return _unit_center(rows, -2, strict, eps, "column")


def segments(bands, n=SEGMENT_LEN):
    """All length-``n`` windows of a (J, M) band matrix, shape (M-n+1, J, n)."""
    view = np.lib.stride_tricks.sliding_window_view(bands, n, axis=1)
    return np.ascontiguousarray(view.transpose(1, 0, 2))


def estoi(clean, processed, segment_len=SEGMENT_LEN, threshold_db=SILENCE_DB):
    """ESTOI of ``processed`` against the ``clean`` reference, in [-1, 1]."""
    clean_samples = clean.samples if isinstance(clean, Waveform) else np.asarray(clean)
    proc_samples = (
        processed.samples if isinstance(processed, Waveform) else np.asarray(processed)
    )
    if len(clean_samples) != len(proc_samples):
        raise ValueError(
            f"signal lengths differ: {len(clean_samples)} vs {len(proc_samples)}"
        )
    c_spec, p_spec = remove_silent_frames(
        stft(clean_samples), stft(proc_samples), threshold_db
    )
    m = c_spec.n_frames
    if m < segment_len:
        raise TooFewFramesError(
            f"{m} non-silent frames left, need at least {segment_len}"
        )
    c_seg = row_col_normalize(segments(octave_bands(c_spec.magnitude), segment_len))
    p_seg = row_col_normalize(segments(octave_bands(p_spec.magnitude), segment_len))
    n_seg = m - segment_len + 1
    return float(np.sum(c_seg * p_seg) / (segment_len * n_seg))
