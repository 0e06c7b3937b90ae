#!/usr/bin/env python3
"""Tour of the sketch data model: vector strokes, simplification, rasters.

Builds a tiny synthetic dataset, walks one instance through RDP
simplification, partial-prefix rendering, and the offset round-trip, and
saves a contact sheet of photo/sketch pairs.
"""

import numpy as np
from pathlib import Path

from sketchlab.sketch import (partial_prefix, rasterize, rdp_simplify,
                              to_absolute, to_offsets)
from sketchlab.synthetic import gen_synthetic_dataset

ds = gen_synthetic_dataset(seed=7, n_classes=3, n_instances_per_class=2,
                           noise_strokes_per_sketch=1)
inst = ds[0]
sketch = inst.sketch
print(f"instance {inst.instance_id}: K={sketch.num_strokes} strokes, "
      f"N={sketch.total_points} points, noise_mask={inst.noise_mask}")

# Ramer-Douglas-Peucker keeps endpoints and everything beyond epsilon
for eps in (0.005, 0.02, 0.05):
    simplified = [rdp_simplify(s, eps) for s in sketch.strokes]
    print(f"  rdp eps={eps}: {sketch.total_points} -> {sum(len(s) for s in simplified)} points")

# the same drawing at five stages of completion
T = 5
for t in range(T + 1):
    prefix = partial_prefix(sketch, t, T)
    ink = rasterize(prefix, 32, 32).intensities.sum()
    print(f"  prefix t={t}/{T}: {prefix.total_points:3d} points, {int(ink):3d} ink pixels")

# offsets encode the pen trajectory; the round trip is exact
seq = to_offsets(sketch)
back = to_absolute(seq)
err = np.abs(back.point_array() - sketch.point_array()).max()
print(f"offset round-trip: {len(seq)} deltas, max coordinate error {err:.2e}")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, len(ds), figsize=(2 * len(ds), 4.2))
    for col, inst in enumerate(ds):
        axes[0, col].imshow(inst.photo.intensities, cmap="gray_r")
        axes[0, col].set_title(f"photo {inst.instance_id}", fontsize=8)
        axes[1, col].imshow(rasterize(inst.sketch, 32, 32).intensities, cmap="gray_r")
        axes[1, col].set_title(f"sketch (class {inst.class_id})", fontsize=8)
        for ax in (axes[0, col], axes[1, col]):
            ax.axis("off")
    fig.tight_layout()
    out_dir = Path(__file__).parent / "out"
    out_dir.mkdir(exist_ok=True)
    fig.savefig(out_dir / "demos_sketch_pairs.png", dpi=120)
    print(f"saved {out_dir / 'demos_sketch_pairs.png'}")
except ImportError:
    print("matplotlib not available; skipped the contact sheet")
