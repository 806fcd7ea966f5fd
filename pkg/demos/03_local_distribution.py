"""
Local distribution after global aggregation
===========================================

LDv1 learns a sigmoid mask M and re-weights the aggregated map,
X_g * (1 + M). LDv2 instead attends over a small k x k (dilated) window
around every position. Both are stitched onto a GA head by gald_forward.
"""
import numpy as np

from gald.ga_heads import GaConfig
from gald.ld_modules import (
    ARRANGEMENTS, Ldv1Config, Ldv2Config, gald_forward, init_gald_params, ldv1_apply, local_attention,
)

rng = np.random.default_rng(0)
x = rng.standard_normal((1, 4, 16, 16))

# the mask only ever scales X_g by a factor in [1, 2]
xg = np.abs(x)
m = rng.uniform(0, 1, size=x.shape)
out, _ = ldv1_apply(xg, m)
print("LDv1 ratio range:", (out / xg).min().round(3), (out / xg).max().round(3))

# local attention: each position sees k*k neighbours; off-grid taps are masked
q, k, v = rng.standard_normal((3, 1, 2, 6, 6))
att, _ = local_attention(q, k, v, k=3, r=1)
print("local attention out", att.shape)

ga = GaConfig("aspp", reduced_channels=4, aspp_rates=(2, 4))
for ld in (Ldv1Config(downsample_ratio=4), Ldv2Config(kernel=5, dilation=3, reduced_channels=4)):
    for arrangement in ARRANGEMENTS:
        params = init_gald_params(ga, ld, 4, seed=1)
        y, _ = gald_forward(x, ga, ld, arrangement, params)
        print(f"{type(ld).__name__:10s} {arrangement:9s} -> {y.shape}")
