"""
Rendering ground-truth views of a procedural scene
===================================================

A scene is a handful of constant-density primitives over a flat
background.  Ray marching through the analytic field gives the
ground-truth images every later stage trains against.
"""

from pathlib import Path

import numpy as np

# a scene is plain JSON: spheres and boxes with colors and densities
from vqgrid import (GridDims, RenderConfig, generate_cameras, load_scene,
                    render_dataset, write_ppm)

out = Path(__file__).parent / "out" / "render_a_scene"
out.mkdir(parents=True, exist_ok=True)

scene = load_scene(Path(__file__).parents[1] / "scenes" / "toy.json")
print(f"scene: {len(scene.primitives)} primitives over background "
      f"{scene.background}")

# cameras sit on a sphere around the origin, all aimed at the target;
# camera 0 is the canonical front view, the rest are seeded jitter
cameras = generate_cameras(6, radius=3.2, width=160, height=160,
                           focal=110.0, seed=0)

# the grid bounds decide where rays start and stop integrating
dims = GridDims(64, 64, 64, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
dataset = render_dataset(scene, cameras, dims, RenderConfig())

for i, image in enumerate(dataset.images):
    write_ppm(image, out / f"view_{i}.ppm")
    print(f"view {i}: mean intensity {float(np.mean(image)):.3f}")

print(f"wrote {len(dataset.images)} PPM images to {out}")
