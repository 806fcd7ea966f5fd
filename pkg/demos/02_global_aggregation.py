"""
Global aggregation heads
========================

Four ways to mix context over the whole feature map. Each keeps the input
shape, so they drop into the same slot of the head.
"""
import numpy as np

from gald.ga_heads import GA_KINDS, GaConfig, ga_forward, init_ga_params
from gald.nn_ops import count_macs

rng = np.random.default_rng(0)
x = rng.standard_normal((1, 8, 32, 32))

for kind in GA_KINDS:
    cfg = GaConfig(kind=kind, reduced_channels=4)
    params = init_ga_params(cfg, 8, seed=1)
    with count_macs() as c:
        out, _ = ga_forward(x, cfg, params)
    print(f"{kind:9s} out {out.shape}  attention MACs {c.count:>8d}")

# non-local attention costs O(N^2); halving the grid first cuts it 16x
for ds in (1, 2):
    cfg = GaConfig(kind="nonlocal", reduced_channels=4, internal_downsample=ds)
    with count_macs() as c:
        ga_forward(x, cfg, init_ga_params(cfg, 8, seed=1))
    print(f"nonlocal, internal downsample {ds}: {c.count} MACs")
