"""
Sweeping the factors of a synthetic digit
=========================================

Each supervised factor is moved across its range while everything else stays
put, and the renders are laid side by side in one PPM strip per factor.
The last strip shows the same scene with each canonicalizer's target.
"""

import sys
from pathlib import Path

import numpy as np

from latcanon.simgen import SUPERVISED, FactorRanges, canonical_target, render_scene, sample_scene
from latcanon.simgen.imageio import image_strip, write_pnm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

ranges = FactorRanges()
scene = sample_scene(ranges, seed=7, index=3)
print(scene)

# continuous factors get seven evenly spaced values, discrete ones every option
sweeps = {
    "font_color": [(v, 0.1, 1 - v) for v in np.linspace(0, 1, 7)],
    "bg_color": [(0.9, v, 0.3) for v in np.linspace(0, 1, 7)],
    "font_size": list(np.linspace(*ranges.font_size, 7)),
    "font_type": list(ranges.font_types),
    "rotation": list(np.linspace(*ranges.rotation, 7)),
    "shear": list(np.linspace(*ranges.shear, 7)),
}
for name in SUPERVISED:
    frames = [render_scene(scene.with_factor(name, v), 32, with_noise=False) for v in sweeps[name]]
    write_pnm(out / f"sweep_{name}.ppm", image_strip(frames))

# the noised input next to the clean render, then one target per canonicalizer
frames = [render_scene(scene, 32, True), render_scene(scene, 32, False)]
frames += [canonical_target(scene, [j], ranges, 32) for j in range(len(SUPERVISED))]
write_pnm(out / "targets.ppm", image_strip(frames))
print("wrote", sorted(p.name for p in out.glob("*.ppm")))
