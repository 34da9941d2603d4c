"""
Importance scoring and voxel pruning
=====================================

Most voxels never matter to any training ray.  Accumulating each sample's
compositing weight (transmittance times alpha) back onto its eight
enclosing voxels produces an importance field; two cumulative-mass
quantiles then split the grid into pruned / vector-quantized / kept-exact
classes.
"""

from pathlib import Path

import numpy as np

from vqgrid import (GridDims, ImportanceConfig, RenderConfig, TrainConfig,
                    classify_voxels, compute_importance, cumulative_score_rate,
                    evaluate_grid, fit_grid, generate_cameras, load_scene,
                    quantile_threshold, render_dataset)
from vqgrid.grid import KEPT, PRUNED, VQ

scene = load_scene(Path(__file__).parents[1] / "scenes" / "toy.json")
dims = GridDims(32, 32, 32, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
render_cfg = RenderConfig()
cams = generate_cameras(8, radius=3.2, width=48, height=48, focal=34.0, seed=1)
dataset = render_dataset(scene, cams, dims, render_cfg)
grid = fit_grid(dataset, dims, 1, TrainConfig(iterations=600, seed=2),
                render_cfg).grid

# importance = how much each voxel contributed to the training renders
field = compute_importance(grid, dataset, ImportanceConfig(), render_cfg)
top = np.sort(field.scores)[::-1]
share = top[: dims.n // 100].sum() / field.total
print(f"the top 1% of voxels carry {100 * share:.1f}% of all importance")

# beta is a fraction of total importance mass, not a voxel count: pruning
# at beta_p = 0.001 discards the voxels that jointly carry 0.1% of it
for beta in (0.001, 0.01, 0.1):
    theta = quantile_threshold(field, beta)
    dropped = np.count_nonzero(field.scores < theta)
    print(f"beta={beta:<6}: threshold {theta:.3e} prunes {dropped} voxels "
          f"({100 * dropped / dims.n:.1f}%), losing "
          f"{100 * cumulative_score_rate(field, theta):.3f}% of mass")

# the pair (beta_p, beta_k) yields the three-way voxel classification
mask, thresholds = classify_voxels(field, ImportanceConfig(beta_p=0.001,
                                                           beta_k=0.6))
n_pruned, n_vq, n_kept = mask.counts()
print(f"classes at (0.001, 0.6): {n_pruned} pruned, {n_vq} vq, {n_kept} kept")

# zeroing the pruned class barely moves reconstruction quality
pruned = grid.copy()
pruned.density[mask.labels == PRUNED] = 0.0
pruned.features_2d[mask.labels == PRUNED] = 0.0
print(f"PSNR dense  {evaluate_grid(grid, dataset, render_cfg):.2f} dB")
print(f"PSNR pruned {evaluate_grid(pruned, dataset, render_cfg):.2f} dB "
      f"after dropping {100 * n_pruned / dims.n:.1f}% of voxels")
