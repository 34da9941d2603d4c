"""
Fitting a voxel grid to posed views
====================================

Gradient descent on the rendering loss turns a random grid into a
radiance field: each step renders a ray batch, compares it against the
ground-truth pixels, and back-propagates through the compositing chain
into voxel densities and spherical-harmonic color coefficients.
"""

from pathlib import Path

from vqgrid import (GridDims, RenderConfig, TrainConfig, evaluate_grid,
                    fit_grid, generate_cameras, load_scene, render_dataset,
                    save_grid)

out = Path(__file__).parent / "out" / "fit_a_grid"
out.mkdir(parents=True, exist_ok=True)

scene = load_scene(Path(__file__).parents[1] / "scenes" / "single_sphere.json")
dims = GridDims(32, 32, 32, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

# rays that exit the grid composite over this color, so it must match the
# scene's background or the fit chases an unreachable target
render_cfg = RenderConfig(background=scene.background)

# a small ring of training views plus a held-out pair for honest numbers
train_cams = generate_cameras(8, radius=3.0, width=48, height=48,
                              focal=34.0, seed=1)
test_cams = generate_cameras(2, radius=3.0, width=48, height=48,
                             focal=34.0, seed=2)
train_ds = render_dataset(scene, train_cams, dims, render_cfg)
test_ds = render_dataset(scene, test_cams, dims, render_cfg)

# degree-1 harmonics: 12 color coefficients per voxel, one density
result = fit_grid(train_ds, dims, sh_degree=1,
                  cfg=TrainConfig(iterations=600, rays_per_batch=2048, seed=3),
                  render_cfg=render_cfg)

losses = result.loss_history
for it in range(0, len(losses), 100):
    print(f"iteration {it:4d}: batch loss {losses[it]:.5f}")
print(f"final train PSNR {result.train_psnr:.2f} dB")
print(f"held-out PSNR   {evaluate_grid(result.grid, test_ds, render_cfg):.2f} dB")

save_grid(result.grid, out / "fitted.vqrg")
print(f"saved the fitted grid to {out / 'fitted.vqrg'}")
