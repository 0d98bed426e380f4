"""
What the rotation canonicalizer removes
=======================================

The difference between a canonicalized latent and the original one should
mostly carry the factor that was removed. Its first principal component is
compared with the true rotation angle, and the raw latent's first component
serves as the control. Both orderings are written as image strips.
"""

import sys
from pathlib import Path

from latcanon.analysis import bypass_pc_control, pca_delta, sort_strip, spearman
from latcanon.canonlearn import TrainMode, pretrain
from latcanon.network import ArchConfig, build_model
from latcanon.simgen import SUPERVISED, FactorRanges, SceneDataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
ranges = FactorRanges.desk()
train = SceneDataset.sample(ranges, 2000, seed=1, size=16)
held_out = SceneDataset.sample(ranges, 1000, seed=5, size=16)

m = build_model(ArchConfig.desk(), seed=0)
pretrain(m, train, TrainMode("latent_canon"), epochs=20, seed=0, lr=3e-3, batch_size=16)

rot = SUPERVISED.index("rotation")
delta = pca_delta(m, held_out, rot)
control = bypass_pc_control(m, held_out)
angle = held_out.factor_values("rotation")
print("explained variance of the delta:", delta.explained_variance[:4].round(4))
print(f"|spearman| PC1 vs rotation: delta {abs(spearman(delta.projections, angle)):.3f}, "
      f"raw latent {abs(spearman(control.projections, angle)):.3f}")
for name, res in (("rotation", delta), ("bypass", control)):
    ppm, _ = sort_strip(held_out, res, out, f"pca_{name}")
    print("wrote", ppm)
