"""
Canonicalizing dSprites latents
===============================

A desk-sized autoencoder is trained on dSprites with one canonicalizer per
factor (shape, scale, rotation, x, y). Afterwards every path, including
triplets that were never trained, is scored by how close its reconstruction
comes to the true canonical image, relative to an untrained network.
"""

import itertools
import time

import numpy as np

from latcanon.canonlearn import TrainMode, apply_path, pretrain
from latcanon.network import ArchConfig, build_model, decode, encode
from latcanon.simgen import DspriteDataset
from latcanon.simgen.dsprites import FACTORS

train = DspriteDataset.sample(2000, seed=0, size=16)
test = DspriteDataset.sample(300, seed=1, size=16)
cfg = ArchConfig.desk(image_channels=1, n_canon=5, n_classes=3)
idx = np.arange(len(test))


def path_mse(m, path):
    z = encode(m, test.images(idx), "eval")
    recon = decode(m, apply_path(m, z, path), "eval").data
    return float(np.mean((recon - test.targets(idx, path)) ** 2))


paths = [(j,) for j in range(5)] + list(itertools.permutations(range(5), 2)) + [(0, 2, 4), (1, 3, 4)]
model = build_model(cfg, seed=0)
before = {p: path_mse(model, p) for p in paths}

t0 = time.time()
log = pretrain(model, train, TrainMode("latent_canon"), epochs=20, seed=0, lr=3e-3, batch_size=16)
print(f"trained 20 epochs in {time.time() - t0:.0f}s, loss {log.rows[0]['total']:.1f} -> {log.rows[-1]['total']:.1f}")

for p in paths:
    name = " . ".join(FACTORS[j] for j in p)
    print(f"{name:<28} {path_mse(model, p) / before[p]:6.1%} of untrained error")
