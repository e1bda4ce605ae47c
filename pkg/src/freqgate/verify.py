"""End-to-end gradient check of the model and its training loss."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .audio import N_BINS
from .loss import e2stoi_loss
from .model import ArchitectureConfig, build, forward

# toy normalisation: magnitudes around exp(-2), well inside the clip range
TOY_STATS = SimpleNamespace(mean=np.full(N_BINS, -4.0), std=np.full(N_BINS, 1.5))


def composite_gradcheck(
    rho=1,
    gating="none",
    frames=5,
    eps=1e-5,
    objective="loss",
    seed=0,
    temporal_hidden=4,
    include_input=True,
    max_coords=None,
    order=2,
    **arch,
):
    """Check d(objective)/d(parameters and input) for a freshly built model.

    ``objective`` is ``"loss"`` (forward then the E2STOI loss against a
    random clean target) or ``"sum"`` (sum of the network output).
    Batch normalisation runs in training mode.
    """
    if objective not in ("loss", "sum"):
        raise ValueError(f"objective must be 'loss' or 'sum', got {objective!r}")
    config = ArchitectureConfig(rho=rho, gating=gating, temporal_hidden=temporal_hidden, **arch)
    model = build(config, seed)
    rng = np.random.default_rng(seed + 1)
    x = ad.Tensor(rng.standard_normal((1, N_BINS, frames)), requires_grad=True)
    clean = rng.standard_normal((N_BINS, frames))
    names = list(model.params)
    inputs = [model.params[n] for n in names]
    if include_input:
        names.append("input")
        inputs.append(x)

    def f(*_):
        y = forward(model, x, training=True)
        if objective == "sum":
            return ad.sum_(y)
        return e2stoi_loss(y[0], clean, TOY_STATS, min_active=min(frames, 10)).total

    report = ad.grad_check_report(f, inputs, eps=eps, max_coords=max_coords, seed=seed, order=order)
    report.worst_name = names[report.worst_input] if report.worst_input >= 0 else ""
    return report
