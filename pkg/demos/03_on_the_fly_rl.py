#!/usr/bin/env python3
"""On-the-fly retrieval: watch the rank of the true photo while a sketch is
drawn, then fine-tune the sketch branch with PPO and compare the curves.

The photo branch stays frozen throughout; only the Gaussian policy head (mean
map initialised from the embedding layer, plus a trainable diagonal
covariance) learns from the episode rewards.
"""

import numpy as np
from pathlib import Path

from sketchlab.models import RasterEncoder
from sketchlab.otf import PPOConfig, RewardScheme, train_otf
from sketchlab.ranking import train_triplet
from sketchlab.synthetic import gen_synthetic_dataset

ds = gen_synthetic_dataset(seed=42, n_classes=8, n_instances_per_class=8,
                           noise_strokes_per_sketch=2)
enc = RasterEncoder(seed=0)
train_triplet(enc, ds, margin=0.3, epochs=40, seed=0)

scheme = RewardScheme(variant="combined", gamma1=1.0, gamma2=1e-4)
config = PPOConfig(variant="actor_only_clip", clip_epsilon=0.2, steps=20,
                   batch_size=16)
policy, report = train_otf(ds, enc, scheme, config, epochs=300, lr=2e-3, seed=1,
                           log=lambda e, d: print(f"  epoch {e}: {d}")
                           if e % 100 == 0 else None)

before, after = report["before"], report["after"]
print(f"m@A  {before['m@A']:.2f} -> {after['m@A']:.2f}")
print(f"m@B  {before['m@B']:.3f} -> {after['m@B']:.3f}")
print(f"backlash {before['backlash']:.5f} -> {after['backlash']:.5f}")
print(f"sigma range after training: [{policy.head.sigma().min():.3f}, "
      f"{policy.head.sigma().max():.3f}]")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = np.linspace(5, 100, len(before["rp_curve"]))
    plt.figure(figsize=(5, 3.2))
    plt.plot(steps, before["rp_curve"], label="frozen triplet baseline")
    plt.plot(steps, after["rp_curve"], label="after PPO fine-tuning")
    plt.xlabel("percentage of sketch")
    plt.ylabel("mean ranking percentile")
    plt.legend()
    plt.tight_layout()
    out_dir = Path(__file__).parent / "out"
    out_dir.mkdir(exist_ok=True)
    plt.savefig(out_dir / "demos_otf_percentile.png", dpi=120)
    print(f"saved {out_dir / 'demos_otf_percentile.png'}")
except ImportError:
    pass
