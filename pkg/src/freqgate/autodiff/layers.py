"""Batch normalisation and the LSTM cell."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import Tensor, add, affine, as_tensor, make_node, matmul, mul, sigmoid, tanh, transpose

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm(
    x,
    gamma,
    beta,
    training,
    running_mean=None,
    running_var=None,
    momentum=BN_MOMENTUM,
    eps=BN_EPS,
    shift=None,
):
    """Per-channel normalisation of ``x + shift`` for ``x`` [B, C, F, T].

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (numpy arrays, updated in place) track them as
    ``momentum * running + (1 - momentum) * batch``.  In inference mode the
    running statistics are used.

    ``shift`` is an optional per-channel constant (a preceding layer's bias).
    In training mode it cancels against the batch mean, so it is left out of
    the arithmetic instead of being added and subtracted again; its gradient
    is then exactly zero rather than rounding noise.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    shift = as_tensor(np.zeros(x.shape[1]) if shift is None else shift)
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects [B,C,F,T], got {x.shape}")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if n < 2:
            raise ValueError("training-mode batch_norm needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * (mu + shift.data)
        if running_var is not None:
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        mu, var = running_mean - shift.data, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    g_ = gamma.data.reshape(shape)
    out = g_ * xhat + beta.data.reshape(shape)

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * g_
        if training:
            gx = (inv_std.reshape(shape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            gshift = np.zeros(shift.shape)
        else:
            gx = dxhat * inv_std.reshape(shape)
            gshift = gx.sum(axis=axes)
        return gx, ggamma, gbeta, gshift

    return make_node(out, (x, gamma, beta, shift), backward)


class LSTMParams(NamedTuple):
    """Gate order in the stacked weights is input, forget, cell, output."""

    w_x: Tensor  # [4H, D]
    w_h: Tensor  # [4H, H]
    b: Tensor  # [4H]
    b_h: Tensor | None = None  # optional second bias vector, summed with ``b``

    @property
    def hidden_size(self):
        return self.w_h.shape[1]


def _cell(zx, state, params):
    h, c = state
    z = add(zx, matmul(h, transpose(params.w_h)))
    if params.b_h is not None:
        z = add(z, params.b_h)
    hs = params.hidden_size
    i = sigmoid(z[..., :hs])
    f = sigmoid(z[..., hs : 2 * hs])
    cand = tanh(z[..., 2 * hs : 3 * hs])
    o = sigmoid(z[..., 3 * hs :])
    c_new = add(mul(f, c), mul(i, cand))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_step(x_t, state, params):
    """One LSTM step; ``x_t`` is [D] or [B, D], ``state`` is ``(h, c)``."""
    return _cell(affine(x_t, params.w_x, params.b), state, params)


def lstm_sequence(xs, params, state=None):
    """Run the cell over ``xs`` [B, T, D] left to right; returns [h_1 .. h_T].

    The input projection for all frames is computed in one product.
    """
    xs = as_tensor(xs)
    b, t_len = xs.shape[0], xs.shape[1]
    hs = params.hidden_size
    if state is None:
        state = (Tensor(np.zeros((b, hs))), Tensor(np.zeros((b, hs))))
    zx = affine(xs, params.w_x, params.b)
    outputs = []
    for t in range(t_len):
        state = _cell(zx[:, t], state, params)
        outputs.append(state[0])
    return outputs
