"""Procedural scenes, cameras, dataset synthesis, and grid fitting.

Ground truth comes from an analytic density/color field (unions of solid
spheres and boxes) raymarched with the same compositor the grid renderer
uses, at a finer step.  That makes the fitting target realizable by the
grid model, so quality losses measured later are attributable to
compression rather than model capacity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import NumericError
from .grid import DenseGrid, GridDims
from .images import psnr, read_vqim, write_vqim
from .render import RenderConfig, backward_batch, camera_rays, render_image


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera: 3x4 world-from-camera pose, focal length in pixels."""

    pose: np.ndarray
    focal: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=np.float64))
        if self.pose.shape != (3, 4):
            raise ValueError("pose must be 3x4")
        r = self.pose[:, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise ValueError("rotation block must be orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")


@dataclass(frozen=True)
class Primitive:
    """A solid constant-density shape; boundaries count as inside."""

    shape: str
    center: tuple
    size: object  # radius (sphere) or full edge lengths (box)
    color: tuple
    density: float

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError("shape must be sphere or box")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "color", tuple(float(v) for v in self.color))
        if self.shape == "sphere":
            object.__setattr__(self, "size", float(self.size))
            if self.size <= 0:
                raise ValueError("sphere radius must be positive")
        else:
            object.__setattr__(self, "size", tuple(float(v) for v in self.size))
            if len(self.size) != 3 or min(self.size) <= 0:
                raise ValueError("box size must be 3 positive extents")
        if self.density < 0:
            raise ValueError("density must be non-negative")
        if min(self.color) < 0 or max(self.color) > 1:
            raise ValueError("colors must lie in [0, 1]")

    def contains(self, x) -> bool:
        q = np.asarray(x, dtype=np.float64) - np.asarray(self.center)
        if self.shape == "sphere":
            return float(q @ q) <= self.size ** 2
        half = np.asarray(self.size) / 2.0
        return bool(np.all(np.abs(q) <= half))


@dataclass(frozen=True)
class SceneSpec:
    """An ordered union of primitives over a constant background."""

    primitives: tuple
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))


@dataclass
class Dataset:
    """Posed cameras with their ground-truth images, tied to a grid size."""

    cameras: list
    images: list
    dims: GridDims

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("need one image per camera")
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError("image size must match its camera")


@dataclass(frozen=True)
class TrainConfig:
    """Plain-SGD settings for fitting a grid to a dataset."""

    iterations: int = 3000
    rays_per_batch: int = 4096
    lr_density: float = 0.1
    lr_features: float = 0.02
    lr_decay: float = 0.3
    lr_decay_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if min(self.iterations, self.rays_per_batch, self.lr_decay_every) <= 0:
            raise ValueError("iteration counts must be positive")
        if min(self.lr_density, self.lr_features, self.lr_decay) <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class FitResult:
    """Fitted grid plus the training record."""

    grid: DenseGrid
    train_psnr: float
    loss_history: np.ndarray


def analytic_field(spec: SceneSpec, x):
    """Ground-truth (sigma, rgb) at a point: first containing primitive wins."""
    for prim in spec.primitives:
        if prim.contains(x):
            return float(prim.density), np.asarray(prim.color, dtype=np.float64)
    return 0.0, np.zeros(3)


def scene_to_json(spec: SceneSpec) -> dict:
    return {
        "background": list(spec.background),
        "primitives": [
            {
                "shape": p.shape,
                "center": list(p.center),
                "size": p.size if p.shape == "sphere" else list(p.size),
                "color": list(p.color),
                "density": p.density,
            }
            for p in spec.primitives
        ],
    }


def scene_from_json(obj: dict) -> SceneSpec:
    prims = tuple(
        Primitive(p["shape"], p["center"], p["size"], p["color"], p["density"])
        for p in obj.get("primitives", [])
    )
    return SceneSpec(prims, tuple(obj.get("background", (1.0, 1.0, 1.0))))


def save_scene(spec: SceneSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_json(spec), fh, indent=2)
        fh.write("\n")


def load_scene(path) -> SceneSpec:
    with open(path) as fh:
        return scene_from_json(json.load(fh))


def _look_at_pose(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    z = eye - target
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z, eye])


def generate_cameras(n: int, radius: float, look_at=(0.0, 0.0, 0.0),
                     width: int = 100, height: int = 100, focal: float = 70.0,
                     seed: int = 0) -> list:
    """Place n cameras on a Fibonacci sphere, all aimed at ``look_at``.

    Latitudes follow ``z_k = 1 - 2k/n`` (camera 0 sits at the top pole) and
    longitudes advance by the golden angle from a seed-derived phase, so a
    fixed (n, seed) pair always yields the same poses.
    """
    if n < 1:
        raise ValueError("need at least one camera")
    if radius <= 0:
        raise ValueError("radius must be positive")
    target = np.asarray(look_at, dtype=np.float64)
    phase = np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    cams = []
    for k in range(n):
        z = 1.0 - 2.0 * k / n
        s = math.sqrt(max(0.0, 1.0 - z * z))
        phi = phase + golden * k
        unit = np.array([s * math.cos(phi), s * math.sin(phi), z])
        eye = target + radius * unit
        cams.append(Camera(_look_at_pose(eye, target), focal, width, height))
    return cams


def _primitive_arrays(spec: SceneSpec):
    p = len(spec.primitives)
    ptype = np.zeros(p, dtype=np.int64)
    center = np.zeros((p, 3))
    extent = np.zeros((p, 3))
    color = np.zeros((p, 3))
    sigma = np.zeros(p)
    for i, prim in enumerate(spec.primitives):
        center[i] = prim.center
        color[i] = prim.color
        sigma[i] = prim.density
        if prim.shape == "sphere":
            extent[i, 0] = prim.size
        else:
            ptype[i] = 1
            extent[i] = np.asarray(prim.size) / 2.0
    return ptype, center, extent, color, sigma


def render_dataset(spec: SceneSpec, cameras, dims: GridDims,
                   cfg: RenderConfig = RenderConfig()) -> Dataset:
    """Raymarch the analytic field into ground-truth images.

    The march uses a quarter of the fitting grid's voxel diagonal as its
    step (finer than rendering, so the target is effectively exact) and
    the scene's own background; only the early-stop threshold is taken
    from ``cfg`` so supervision matches what rendering will do.
    """
    ptype, center, extent, color, sigma = _primitive_arrays(spec)
    step = 0.25 * dims.voxel_diagonal
    lo, hi = dims.lower, dims.upper
    bg = spec.background
    images = []
    for cam in cameras:
        origins, dirs = camera_rays(cam)
        m = origins.shape[0]
        out = np.empty((m, 3))
        _kernels._analytic_batch(
            ptype, center, extent, color, sigma,
            lo[0], lo[1], lo[2], hi[0], hi[1], hi[2],
            origins, dirs, np.zeros(m), np.full(m, 1e30),
            step, cfg.early_stop_T, bg[0], bg[1], bg[2], out)
        images.append(out.reshape(cam.height, cam.width, 3).astype(np.float32))
    return Dataset(list(cameras), images, dims)


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Cache a dataset as VQIM images plus a JSON camera manifest."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "dims": {
            "shape": list(dataset.dims.shape),
            "aabb_min": list(dataset.dims.aabb_min),
            "aabb_max": list(dataset.dims.aabb_max),
        },
        "cameras": [
            {
                "pose": cam.pose.tolist(),
                "focal": cam.focal,
                "width": cam.width,
                "height": cam.height,
            }
            for cam in dataset.cameras
        ],
    }
    with open(os.path.join(out_dir, "cameras.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    for i, img in enumerate(dataset.images):
        write_vqim(img, os.path.join(out_dir, f"view_{i:04d}.vqim"))


def load_dataset(out_dir) -> Dataset:
    import os

    with open(os.path.join(out_dir, "cameras.json")) as fh:
        manifest = json.load(fh)
    d = manifest["dims"]
    dims = GridDims(*d["shape"], tuple(d["aabb_min"]), tuple(d["aabb_max"]))
    cameras = [
        Camera(np.asarray(c["pose"]), c["focal"], c["width"], c["height"])
        for c in manifest["cameras"]
    ]
    images = [
        read_vqim(os.path.join(out_dir, f"view_{i:04d}.vqim"))
        for i in range(len(cameras))
    ]
    return Dataset(cameras, images, dims)


def dataset_rays(dataset: Dataset):
    """All training rays and target pixels, flattened across views."""
    origins, dirs, gts = [], [], []
    for cam, img in zip(dataset.cameras, dataset.images):
        o, d = camera_rays(cam)
        origins.append(o)
        dirs.append(d)
        gts.append(img.reshape(-1, 3).astype(np.float64))
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(gts)


def fit_grid(dataset: Dataset, dims: GridDims, sh_degree: int,
             cfg: TrainConfig = TrainConfig(),
             render_cfg: RenderConfig = RenderConfig(),
             init_density: float = 0.1, init_grid=None) -> FitResult:
    """Fit a dense grid to a dataset by plain SGD on random ray batches.

    The objective is the squared pixel error summed over the whole training
    set; each batch yields the unbiased gradient estimate (batch sum scaled
    by ``total_rays / rays_per_batch``).  The recorded loss history is the
    batch's per-pixel-channel mean.  Learning rates decay by ``lr_decay``
    every ``lr_decay_every`` iterations.  Runs are bit-reproducible for a
    fixed seed.  Optimization starts from a copy of ``init_grid`` when one
    is given, else from uniform ``init_density`` and zero features.
    """
    if not dataset.images:
        raise ValueError("dataset is empty")
    n, c = dims.n, 3 * (sh_degree + 1) ** 2
    if init_grid is not None:
        if init_grid.dims != dims or init_grid.sh_degree != sh_degree:
            raise ValueError("init grid must match dims and sh_degree")
        grid = init_grid.copy()
    else:
        grid = DenseGrid(
            dims, sh_degree,
            np.full(n, init_density, dtype=np.float32),
            np.zeros(n * c, dtype=np.float32),
        )
    origins, dirs, gts = dataset_rays(dataset)
    total = origins.shape[0]
    scale = total / cfg.rays_per_batch
    rng = np.random.default_rng(cfg.seed)
    d_density = np.zeros(n, dtype=np.float32)
    d_features = np.zeros(n * c, dtype=np.float32)
    touched = np.zeros(n, dtype=np.uint8)
    feats2 = grid.features_2d
    dfeat2 = d_features.reshape(n, c)
    history = np.zeros(cfg.iterations)
    for it in range(cfg.iterations):
        decay = cfg.lr_decay ** (it // cfg.lr_decay_every)
        lr_d = cfg.lr_density * decay * scale
        lr_f = cfg.lr_features * decay * scale
        sel = rng.integers(0, total, size=cfg.rays_per_batch)
        loss = backward_batch(grid, origins[sel], dirs[sel], gts[sel],
                              render_cfg, d_density, d_features, touched)
        history[it] = loss / (cfg.rays_per_batch * 3)
        if not math.isfinite(loss):
            raise NumericError("training diverged")
        tidx = np.nonzero(touched)[0]
        grid.density[tidx] -= lr_d * d_density[tidx]
        feats2[tidx] -= lr_f * dfeat2[tidx]
        d_density[tidx] = 0.0
        dfeat2[tidx] = 0.0
        touched[tidx] = 0
    return FitResult(grid, evaluate_grid(grid, dataset, render_cfg), history)


def evaluate_grid(grid: DenseGrid, dataset: Dataset,
                  render_cfg: RenderConfig = RenderConfig()) -> float:
    """PSNR of the grid's renders against a dataset, pooled over all views."""
    renders = [render_image(grid, cam, render_cfg) for cam in dataset.cameras]
    return psnr(np.stack(renders), np.stack(dataset.images))
