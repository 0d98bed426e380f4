"""
Few-shot transfer to a shifted domain
=====================================

Pretrain on simulated digits, then refine on ten labelled images per class
from a domain whose colours, rotations and noise are shifted. The
canonicalizers stay frozen during refinement and are reused at test time as
extra voters.
"""

import numpy as np

from latcanon.canonlearn import TrainMode, accuracy, pretrain, refine_fewshot
from latcanon.canonlearn.vote import VOTE_SETS, vote_accuracy
from latcanon.network import ArchConfig, build_model
from latcanon.simgen import DEFAULT_SHIFT, FactorRanges, SceneDataset, shifted_domain

source = FactorRanges.desk()
target = shifted_domain(source, DEFAULT_SHIFT)
train = SceneDataset.sample(source, 2000, seed=1, size=16)
target_train = SceneDataset.sample(target, 1000, seed=2, size=16)
target_test = SceneDataset.sample(target, 500, seed=3, size=16)

results = {}
for mode in ("latent_canon", "ae_cls"):
    m = build_model(ArchConfig.desk(), seed=0)
    pretrain(m, train, TrainMode(mode), epochs=20, seed=0, lr=3e-3, batch_size=16)
    print(f"{mode}: source {accuracy(m, train):.3f}, shifted zero-shot {accuracy(m, target_test):.3f}")
    accs = []
    for rs in range(3):
        refined, acc = refine_fewshot(m, target_train, target_test, 10, lr=1e-4, seed=rs)
        accs.append(acc)
        if mode == "latent_canon":
            votes = {v: vote_accuracy(refined, target_test, v) for v in VOTE_SETS}
            print("   votes", {k: round(v, 3) for k, v in votes.items()}, "plain", round(acc, 3))
    results[mode] = accs

scratch = [refine_fewshot(build_model(ArchConfig.desk(), seed=rs), target_train, target_test, 10,
                          lr=3e-3, seed=rs)[1] for rs in range(3)]
results["cls_only"] = scratch
for mode, accs in results.items():
    print(f"{mode:>12}: {100 * np.mean(accs):.1f} +- {100 * np.std(accs):.1f}% at 10 shots/class")
