"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import record_branches

REL_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int
    n_skipped: int = 0
    worst_name: str = ""


def relative_error(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _evaluate(f, inputs, track):
    if not track:
        return float(f(*inputs).data), None
    with record_branches() as log:
        value = float(f(*inputs).data)
    return value, log


# central difference weights for the offsets +-1 and +-2 times eps
STENCILS = {2: ((1, 0.5),), 4: ((1, 2.0 / 3.0), (2, -1.0 / 12.0))}


def grad_check_report(f, inputs, eps=1e-6, max_coords=None, seed=0, skip_kinks=True, order=2):
    """Compare backward gradients of scalar ``f(*inputs)`` with central differences.

    ``order`` selects the three-point (2) or five-point (4) central stencil;
    the latter tolerates a larger ``eps`` and so loses fewer digits to
    rounding.  ``max_coords`` caps the number of coordinates checked per
    input (chosen at random with ``seed``); by default every coordinate is
    checked.  With ``skip_kinks`` a coordinate is skipped when any stencil
    point flips a ReLU or clamp element to another branch, since the
    difference quotient then straddles a kink.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if order not in STENCILS:
        raise ValueError(f"order must be one of {sorted(STENCILS)}, got {order}")
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with record_branches() as base_branches:
        out = f(*inputs)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise ValueError("function value is not finite")
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = GradCheckReport(0.0, -1, (), 0.0, 0.0, 0)
    n_checked = n_skipped = 0
    for which, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for idx in coords:
            orig = flat[idx]
            numeric, crossed = 0.0, False
            for step, weight in STENCILS[order]:
                flat[idx] = orig + step * eps
                f_plus, br_plus = _evaluate(f, inputs, skip_kinks)
                flat[idx] = orig - step * eps
                f_minus, br_minus = _evaluate(f, inputs, skip_kinks)
                flat[idx] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise ValueError(f"non-finite function value perturbing input {which}[{idx}]")
                if skip_kinks and not (
                    _same_branches(base_branches, br_plus) and _same_branches(base_branches, br_minus)
                ):
                    crossed = True
                    break
                numeric += weight * (f_plus - f_minus) / eps
            if crossed:
                n_skipped += 1
                continue
            a = analytic[which].reshape(-1)[idx]
            err = float(relative_error(a, numeric))
            n_checked += 1
            if err > worst.max_rel_error or worst.worst_input < 0:
                worst = GradCheckReport(
                    err, which, tuple(int(i) for i in np.unravel_index(idx, t.shape)), float(a), numeric, 0
                )
    worst.n_checked = n_checked
    worst.n_skipped = n_skipped
    return worst


def grad_check(f, inputs, eps=1e-6, **kwargs):
    """Maximum relative error between analytic and central-difference gradients."""
    return grad_check_report(f, inputs, eps, **kwargs).max_rel_error
