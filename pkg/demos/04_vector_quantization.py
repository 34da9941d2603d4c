"""
Learning a codebook for voxel colors
=====================================

The middle voxel class keeps its density but trades its color
coefficients for an index into a small learned codebook.  Codes train on
importance-weighted feature batches with a moving-average update, and
rarely-used codes are re-seeded from the busiest clusters.
"""

from pathlib import Path

import numpy as np

from vqgrid import (GridDims, ImportanceConfig, RenderConfig, TrainConfig,
                    VQConfig, assign, build_vq_model, classify_voxels,
                    compression_rate, compute_importance, evaluate_grid,
                    expand_vq_model, fit_grid, generate_cameras, load_scene,
                    render_dataset, weighted_wcss)
from vqgrid.grid import VQ
from vqgrid.vq import init_codebook

scene = load_scene(Path(__file__).parents[1] / "scenes" / "toy.json")
dims = GridDims(32, 32, 32, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
render_cfg = RenderConfig()
cams = generate_cameras(8, radius=3.2, width=48, height=48, focal=34.0, seed=1)
dataset = render_dataset(scene, cams, dims, render_cfg)
grid = fit_grid(dataset, dims, 1, TrainConfig(iterations=600, seed=2),
                render_cfg).grid
field = compute_importance(grid, dataset, render_cfg=render_cfg)
mask, _ = classify_voxels(field, ImportanceConfig(beta_p=0.001, beta_k=0.6))
n_vq = int(np.count_nonzero(mask.labels == VQ))

# larger codebooks cost more bits per index AND more half-float storage,
# so the storage ratio over raw features has a sweet spot
for K in (16, 64, 256):
    print(f"K={K:<4}: storage ratio {compression_rate(n_vq, 12, K):6.2f}x "
          f"over {n_vq} raw feature rows")

# train a codebook on the VQ class, weighted by importance
cfg = VQConfig(K=64, init_iters=100, batch_voxels=4096, seed=3)
book = init_codebook(grid, field, mask, cfg)
vq_feats = grid.features_2d[mask.labels == VQ]
vq_imps = field.scores[mask.labels == VQ]
wcss = weighted_wcss(vq_feats, vq_imps, book)
print(f"codebook: {book.K} codes, weighted WCSS {wcss:.4f}, "
      f"{np.count_nonzero(book.capacity > 0)} codes carrying mass")

# nearest-code assignment replaces each VQ voxel's 12 coefficients
codes = assign(vq_feats, book)
used, counts = np.unique(codes, return_counts=True)
print(f"assignment uses {used.size}/{book.K} codes; busiest holds "
      f"{counts.max()} voxels")

# pack the classification + codebook into a quantized model and compare
model = build_vq_model(grid, mask, book)
approx = expand_vq_model(model)
print(f"PSNR dense     {evaluate_grid(grid, dataset, render_cfg):.2f} dB")
print(f"PSNR quantized {evaluate_grid(approx, dataset, render_cfg):.2f} dB")
