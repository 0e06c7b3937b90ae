#!/usr/bin/env python3
"""The numerical substrate and the base retrieval model.

Shows reverse-mode gradients agreeing with finite differences, the Adam
update, and triplet training of the shared raster encoder with its ranking
metrics.
"""

import numpy as np

from sketchlab import autodiff as ad
from sketchlab.autodiff import Tensor, grad_check
from sketchlab.models import RasterEncoder
from sketchlab.optim import Adam
from sketchlab.ranking import build_gallery, evaluate_accuracy, rank_of, train_triplet
from sketchlab.sketch import rasterize
from sketchlab.synthetic import gen_synthetic_dataset

# gradients: a composite loss checked against central differences
rng = np.random.default_rng(0)
a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
target = rng.standard_normal((3, 3))
err = grad_check(lambda x, y: ad.squared_error(ad.tanh(ad.matmul(x, y)), target), [a, b])
print(f"grad check on tanh(A@B) mse: max relative error {err:.2e}")

# Adam fits a small least-squares problem
w = Tensor(np.zeros(4), requires_grad=True)
x_data = rng.standard_normal((64, 4))
y_data = x_data @ np.array([1.0, -2.0, 0.5, 3.0])
opt = Adam({"w": w}, lr=0.1)
for step in range(200):
    pred = ad.sum_(ad.mul(Tensor(x_data), w), axis=1)
    loss = ad.squared_error(pred, y_data)
    opt.zero_grad()
    loss.backward()
    opt.step()
print(f"adam linear fit: loss {loss.item():.2e}, w = {np.round(w.data, 3)}")

# triplet training: sketches retrieve their paired photos
ds = gen_synthetic_dataset(seed=21, n_classes=8, n_instances_per_class=8,
                           noise_strokes_per_sketch=0)
enc = RasterEncoder(seed=0)
losses = train_triplet(enc, ds, margin=0.3, epochs=30, seed=0)
print(f"triplet loss: {losses[0]:.3f} -> {losses[-1]:.4f} over {len(losses)} epochs")
print("retrieval:", {k: round(v, 4) for k, v in evaluate_accuracy(enc, ds).items()})

gallery = build_gallery(enc, ds)
query = ds[5]
with ad.no_grad():
    emb = enc.embed(rasterize(query.sketch, 32, 32).intensities[None]).data[0]
rank, order = rank_of(emb, gallery, query.instance_id)
print(f"query {query.instance_id}: true photo ranked {rank} of {len(gallery)}; "
      f"top-5 rows {order[:5].tolist()}")
