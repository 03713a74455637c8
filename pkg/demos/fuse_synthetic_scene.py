"""Train a small fusion model on one synthetic scene and compare it with bicubic upsampling.

Run with ``python3 demos/fuse_synthetic_scene.py``; it takes about a minute.
"""

import numpy as np

from fuselab import tensor as T
from fuselab.datagen import extract_patches, make_triple, synth_scene
from fuselab.metrics import reduced_metrics
from fuselab.training import FusionArrays, TrainConfig, fit
from fuselab.u2net import ModelConfig, param_count, u2net_forward

# A 4-band ground truth, its simulated panchromatic image and its 4x coarser copy.
scene = make_triple(synth_scene(128, 128, 4, seed=0), id="demo")
patches = extract_patches(scene, 32, 32)
train, held_out = patches[:12], patches[12:]
data = FusionArrays.from_triples(train)

# The concatenation variant trains quickest on one core; swap in "full" to compare.
model = ModelConfig(pan_channels=1, bands=4, width=16, head_width=8, variant="v2")
print(f"model: {param_count(model)} parameters")

result = fit(model, data, TrainConfig(lr0=1e-3, epochs=150, batch_size=4, halve_every=100))
print(f"training loss {result.losses[0]:.2f} -> {result.losses[-1]:.2f}")

test = FusionArrays.from_triples(held_out)
with T.no_grad():
    fused = u2net_forward(test.A, test.B, result.params, model, BU=test.BU).data
fused = np.clip(fused, 0, 1)

for name, est in (("bicubic", test.BU), ("fused", fused)):
    scores = [reduced_metrics(o, x, block=32) for o, x in zip(est, test.X)]
    mean = {k: np.mean([s[k] for s in scores]) for k in scores[0]}
    print(f"{name:8s} " + "  ".join(f"{k} {v:.4f}" for k, v in mean.items()))
