"""What the two self-correlation matrices inside the fusion block look like.

The spatial matrix relates every pixel to every other pixel, the spectral one
relates feature channels; both are row-stochastic.
"""

import numpy as np

from fuselab import tensor as T
from fuselab.s2block import spatial_self_correlation, spectral_self_correlation, ssio_fuse

rng = np.random.default_rng(0)
hw, s_prime, heads = 16, 4, 2
ta, tb, tc, td = (T.Tensor(rng.standard_normal((hw, s_prime, heads))) for _ in range(4))

cspa = spatial_self_correlation(ta, tb).data
cspe = spectral_self_correlation(tc, td).data
print("spatial matrix", cspa.shape, "row sums", np.round(cspa.sum(axis=1)[:3, 0], 12))
print("spectral matrix", cspe.shape, "row sums", np.round(cspe.sum(axis=1)[:, 0], 12))

# The spectral logits are scaled by HW / sqrt(S'^3), so with many positions
# the rows become nearly one-hot.
for positions in (4, 64, 1024):
    tc_n = T.Tensor(rng.standard_normal((positions, s_prime, 1)))
    td_n = T.Tensor(rng.standard_normal((positions, s_prime, 1)))
    peak = spectral_self_correlation(tc_n, td_n).data.max(axis=1).mean()
    print(f"HW={positions:5d}: mean largest spectral weight per row {peak:.3f}")

# Identical rows give a uniform spatial matrix.
flat = T.Tensor(np.tile(rng.standard_normal((1, s_prime, heads)), (hw, 1, 1)))
print("uniform when rows agree:", np.allclose(spatial_self_correlation(flat, flat).data, 1 / hw))

fused = ssio_fuse(T.Tensor(cspa), T.Tensor(cspe), tb, tc)
print("fused features", fused.shape)
