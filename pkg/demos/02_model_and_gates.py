"""
The gated autoencoder
=====================

Build the four gating variants, compare their sizes, run a forward pass and
look at the gate weights each variant produces.  Finishes with a finite
difference check of the whole model plus loss at the smallest width.
Run with ``python3 demos/02_model_and_gates.py``.
"""

import numpy as np

from freqgate import autodiff as ad
from freqgate.model import ArchitectureConfig, build, compute_gates, count_params, forward
from freqgate.verify import composite_gradcheck

# %% parameter counts of the reported configurations
reported = [
    ("none", dict(rho=37)),
    ("freq_wise", dict(rho=37)),
    ("local", dict(rho=36, share_gates=True)),
    ("temporal", dict(rho=36, share_gates=True, temporal_hidden=36, temporal_map="rescale", lstm_dual_bias=True)),
]
for gating, options in reported:
    n = count_params(build(ArchitectureConfig(gating=gating, **options)))
    print(f"{gating:10s} rho={options['rho']}  {n:8d} parameters")

# %% layer schedule of a small network
config = ArchitectureConfig(rho=4, gating="local")
for spec in config.layers():
    kind = "tconv" if spec.transposed else "conv "
    print(f"{spec.name:4s} {kind} {spec.in_ch:2d} -> {spec.out_ch:2d}  kernel {spec.kernel}  stride {spec.stride}")

# %% forward pass and gates
rng = np.random.default_rng(0)
x = rng.normal(size=(1, 257, 40))
for gating in ("none", "freq_wise", "local", "temporal"):
    model = build(ArchitectureConfig(rho=4, gating=gating, temporal_hidden=16), seed=0)
    y = forward(model, ad.Tensor(x), training=False)
    gates = compute_gates(model, x)
    if gates is None:
        print(f"{gating:10s} output {y.shape}, no gates")
        continue
    g = gates.data
    print(f"{gating:10s} output {y.shape}, gates {g.shape} in [{g.min():.3f}, {g.max():.3f}]")

# %% gradient check of model plus loss
report = composite_gradcheck(gating="local", rho=1, frames=5, max_coords=40, eps=1e-4, order=4)
print(f"\nlocal gating, rho=1, 257x5 input: max rel error {report.max_rel_error:.2e} over {report.n_checked} coordinates")
