"""2-D cross-correlation and its exact adjoint (transposed convolution).

Tensors are laid out ``[batch, channel, freq, time]``; 3-D inputs get a
singleton batch axis that is removed again on output.  Both directions are
built from one im2col/col2im pair, so the transposed operator is the adjoint
of :func:`conv2d` by construction.
"""

from __future__ import annotations

import numpy as np

from .core import as_tensor, make_node


def conv_output_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _im2col(xp, kf, kt, sf, st):
    """Padded input (B, C, F, T) -> columns (C*kf*kt, B*Fo*To)."""
    b, c, fp, tp = xp.shape
    fo = (fp - kf) // sf + 1
    to = (tp - kt) // st + 1
    src = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((c, kf, kt, b, fo, to))
    for i in range(kf):
        for j in range(kt):
            cols[:, i, j] = src[:, :, i : i + sf * (fo - 1) + 1 : sf, j : j + st * (to - 1) + 1 : st]
    return cols.reshape(c * kf * kt, b * fo * to), fo, to


def _col2im(cols, padded_shape, kf, kt, sf, st, fo, to):
    """Scatter-add columns (C*kf*kt, B*Fo*To) into a zero array of ``padded_shape``."""
    b, c, fp, tp = padded_shape
    out = np.zeros((c, b, fp, tp))
    blocks = cols.reshape(c, kf, kt, b, fo, to)
    for i in range(kf):
        for j in range(kt):
            out[:, :, i : i + sf * (fo - 1) + 1 : sf, j : j + st * (to - 1) + 1 : st] += blocks[
                :, i, j
            ]
    return out.transpose(1, 0, 2, 3)


def _pad(x, pf, pt):
    if pf == 0 and pt == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pf, pf), (pt, pt)))


def _unpad(x, pf, pt):
    f, t = x.shape[2], x.shape[3]
    return x[:, :, pf : f - pf, pt : t - pt]


def _as_batched(x):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"expected [C,F,T] or [B,C,F,T] input, got shape {x.shape}")


def conv2d(x, k, stride=(1, 1), padding=(0, 0)):
    """Cross-correlate ``x`` [B, C_in, F, T] with ``k`` [C_out, C_in, kf, kt]."""
    x, k = as_tensor(x), as_tensor(k)
    sf, st = _pair(stride)
    pf, pt = _pair(padding)
    xd, squeeze = _as_batched(x)
    if k.ndim != 4 or k.shape[1] != xd.shape[1]:
        raise ValueError(f"kernel {k.shape} does not match input channels {xd.shape[1]}")
    o, c, kf, kt = k.shape
    if xd.shape[2] + 2 * pf < kf or xd.shape[3] + 2 * pt < kt:
        raise ValueError(f"padded input {xd.shape[2:]} smaller than kernel {(kf, kt)}")
    xp = _pad(xd, pf, pt)
    cols, fo, to = _im2col(xp, kf, kt, sf, st)
    kmat = k.data.reshape(o, -1)
    b = xd.shape[0]
    out = (kmat @ cols).reshape(o, b, fo, to).transpose(1, 0, 2, 3)

    def backward(g):
        if squeeze:
            g = g[None]
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gk = (gmat @ cols.T).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _unpad(_col2im(kmat.T @ gmat, xp.shape, kf, kt, sf, st, fo, to), pf, pt)
            if squeeze:
                gx = gx[0]
        return gx, gk

    out = np.ascontiguousarray(out)
    return make_node(out[0] if squeeze else out, (x, k), backward)


def conv2d_transposed(x, k, stride=(1, 1), padding=(0, 0), out_shape=None):
    """Adjoint of :func:`conv2d` with the same kernel and geometry.

    ``k`` has shape [C_in, C_out, kf, kt] where ``C_in`` matches the channels
    of ``x``.  ``out_shape`` is the spatial (F, T) of the result; it must be a
    size from which the forward convolution lands on ``x``'s spatial size.
    """
    x, k = as_tensor(x), as_tensor(k)
    sf, st = _pair(stride)
    pf, pt = _pair(padding)
    xd, squeeze = _as_batched(x)
    if k.ndim != 4 or k.shape[0] != xd.shape[1]:
        raise ValueError(f"kernel {k.shape} does not match input channels {xd.shape[1]}")
    cin, cout, kf, kt = k.shape
    fi, ti = xd.shape[2], xd.shape[3]
    if out_shape is None:
        out_shape = ((fi - 1) * sf - 2 * pf + kf, (ti - 1) * st - 2 * pt + kt)
    fo, to = out_shape
    if conv_output_size(fo, kf, sf, pf) != fi or conv_output_size(to, kt, st, pt) != ti:
        raise ValueError(
            f"out_shape {tuple(out_shape)} is inconsistent with input {(fi, ti)} "
            f"for kernel {(kf, kt)}, stride {(sf, st)}, padding {(pf, pt)}"
        )
    b = xd.shape[0]
    padded_shape = (b, cout, fo + 2 * pf, to + 2 * pt)
    kmat = k.data.reshape(cin, -1)
    xmat = xd.transpose(1, 0, 2, 3).reshape(cin, -1)
    out = _unpad(_col2im(kmat.T @ xmat, padded_shape, kf, kt, sf, st, fi, ti), pf, pt)

    def backward(g):
        if squeeze:
            g = g[None]
        cols, _, _ = _im2col(_pad(g, pf, pt), kf, kt, sf, st)
        gk = (xmat @ cols.T).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = (kmat @ cols).reshape(cin, b, fi, ti).transpose(1, 0, 2, 3)
            gx = gx[0] if squeeze else gx
        return gx, gk

    out = np.ascontiguousarray(out)
    return make_node(out[0] if squeeze else out, (x, k), backward)
