"""Forward volume rendering with analytic density/feature gradients.

Pixels follow the standard emission-absorption model: with per-sample
opacity ``alpha_i = 1 - exp(-sigma_i * delta_i)`` and transmittance
``T_i = prod_{j<i} (1 - alpha_j)``, a ray's color is
``sum_i T_i * alpha_i * c_i + T_final * background``.  Densities interpolate
raw grid values and pass through max(0, .); colors come from a real
spherical-harmonic expansion of the view direction squashed by a sigmoid.

Sampling is uniform per ray: the intersection interval of length L is cut
into ``ceil(L / (step_size * voxel_diagonal))`` equal steps and samples sit
at step midpoints, so ``delta_i`` is constant along a ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .grid import DenseGrid, GridDims

_SH_C1 = _kernels.SH_C1
_SH_C2 = (_kernels.SH_C2_0, _kernels.SH_C2_1, _kernels.SH_C2_2,
          _kernels.SH_C2_3, _kernels.SH_C2_4)


@dataclass(frozen=True)
class Ray:
    """A world-space ray with a unit direction and parametric bounds."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = 1e30

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))
        if self.origin.shape != (3,) or self.direction.shape != (3,):
            raise ValueError("origin and direction must be 3-vectors")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be below t_far")


@dataclass
class SamplePoint:
    """One marched sample with the compositing state at that point."""

    position: np.ndarray
    t: float
    #: segment length in voxel-diagonal units (what the density multiplies).
    delta: float
    sigma: float
    color: np.ndarray
    alpha: float
    transmittance: float
    point_importance: float


@dataclass(frozen=True)
class RenderConfig:
    """Marching and shading knobs.

    ``step_size`` is a fraction of the voxel diagonal; densities are
    extinction per voxel diagonal, so a sample's optical depth is
    ``sigma * step_size`` regardless of scene scale.  The density
    activation (ReLU) and color transform (sigmoid on the SH sum) are part
    of the model definition and not configurable.
    """

    step_size: float = 0.5
    early_stop_T: float = 1e-4
    background: tuple = (1.0, 1.0, 1.0)
    sigma_activation: str = "relu"
    color_transform: str = "sigmoid"

    def __post_init__(self):
        if not self.step_size > 0.0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.early_stop_T < 1.0:
            raise ValueError("early_stop_T must lie in [0, 1)")
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))
        if len(self.background) != 3:
            raise ValueError("background must be a 3-vector")
        if self.sigma_activation != "relu" or self.color_transform != "sigmoid":
            raise ValueError("only relu density and sigmoid color are supported")

    def step_world(self, dims: GridDims) -> float:
        """Nominal step length in scene units."""
        return self.step_size * dims.voxel_diagonal


@dataclass
class SparseGradients:
    """Loss gradients of one backward pass, in coordinate form."""

    density_index: np.ndarray
    density_grad: np.ndarray
    feature_index: np.ndarray
    feature_channel: np.ndarray
    feature_grad: np.ndarray


def intersect_aabb(ray: Ray, dims: GridDims):
    """Clip a ray against the grid box.

    Returns (t_enter, t_exit) or None on a miss.  The interval is also
    clipped to the ray's own [t_near, t_far].
    """
    t0, t1 = ray.t_near, ray.t_far
    for ax in range(3):
        o, d = ray.origin[ax], ray.direction[ax]
        lo, hi = dims.aabb_min[ax], dims.aabb_max[ax]
        if abs(d) > 1e-12:
            ta, tb = (lo - o) / d, (hi - o) / d
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
        elif o < lo or o > hi:
            return None
    if t1 <= t0:
        return None
    return float(t0), float(t1)


def _cell_coords(dims: GridDims, x: np.ndarray):
    """Clamped cell coordinates, base voxel, and per-axis fractions."""
    shape = np.array(dims.shape, dtype=np.float64)
    u = (x - dims.lower) / dims.cell_size - 0.5
    u = np.clip(u, 0.0, shape - 1.0)
    i0 = np.minimum(u.astype(np.int64), np.array(dims.shape) - 2)
    return i0, u - i0


def trilerp(values: np.ndarray, dims: GridDims, x):
    """Interpolate per-voxel values at world positions.

    Args:
        values: (N,) scalars or (N, C) vectors, voxel-major.
        dims: grid geometry.
        x: one 3-vector or an (M, 3) array of positions inside the box.

    Returns:
        Interpolated value(s); weights are the separable products
        ``prod_axis (1 - |delta|)`` over the 8 surrounding voxel centers,
        with border positions clamping to edge voxels.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    if np.any(pts < dims.lower - 1e-12) or np.any(pts > dims.upper + 1e-12):
        raise ValueError("sample outside grid")
    vals = np.asarray(values)
    flat = vals.ndim == 1
    v2 = vals[:, None] if flat else vals
    i0, frac = _cell_coords(dims, pts)
    out = np.zeros((pts.shape[0], v2.shape[1]), dtype=np.float64)
    for corner in range(8):
        off = np.array([corner & 1, (corner >> 1) & 1, (corner >> 2) & 1])
        w = np.prod(np.where(off, frac, 1.0 - frac), axis=1)
        idx = (i0[:, 0] + off[0]) + dims.nx * ((i0[:, 1] + off[1]) + dims.ny * (i0[:, 2] + off[2]))
        out += w[:, None] * v2[idx]
    if flat:
        out = out[:, 0]
    return out[0] if single else out


def sh_basis(view_dir, degree: int) -> np.ndarray:
    """Real spherical-harmonic basis values for a unit direction."""
    d = np.asarray(view_dir, dtype=np.float64)
    x, y, z = d
    basis = np.empty((degree + 1) ** 2, dtype=np.float64)
    basis[0] = _kernels.SH_C0
    if degree >= 1:
        basis[1] = -_SH_C1 * y
        basis[2] = _SH_C1 * z
        basis[3] = -_SH_C1 * x
    if degree >= 2:
        basis[4] = _SH_C2[0] * x * y
        basis[5] = _SH_C2[1] * y * z
        basis[6] = _SH_C2[2] * (2.0 * z * z - x * x - y * y)
        basis[7] = _SH_C2[3] * x * z
        basis[8] = _SH_C2[4] * (x * x - y * y)
    return basis


def eval_sh(coeffs, view_dir) -> np.ndarray:
    """Evaluate SH color coefficients toward a view direction (pre-sigmoid)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    nb = coeffs.size // 3
    degree = int(round(math.sqrt(nb))) - 1
    if 3 * (degree + 1) ** 2 != coeffs.size:
        raise ValueError("coefficient count must be 3*(degree+1)^2")
    return coeffs.reshape(3, nb) @ sh_basis(view_dir, degree)


def composite(alphas, colors, background=(0.0, 0.0, 0.0)):
    """Front-to-back alpha compositing of an explicit sample list.

    Returns (pixel, weights, T_final) where ``weights[i] = T_i * alpha_i``
    and ``T_final`` is the transmittance left for the background.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64).reshape(len(alphas), 3)
    trans = np.cumprod(np.concatenate(([1.0], 1.0 - alphas)))
    weights = trans[:-1] * alphas
    pixel = weights @ colors + trans[-1] * np.asarray(background, dtype=np.float64)
    return pixel, weights, float(trans[-1])


def _grid_kernel_args(grid: DenseGrid):
    d = grid.dims
    cs = d.cell_size
    return (grid.density, grid.features, (grid.sh_degree + 1) ** 2,
            d.nx, d.ny, d.nz,
            d.aabb_min[0], d.aabb_min[1], d.aabb_min[2],
            float(cs[0]), float(cs[1]), float(cs[2]))


def render_rays(grid: DenseGrid, origins, directions, cfg: RenderConfig = RenderConfig(),
                t_near=None, t_far=None) -> np.ndarray:
    """Render a batch of rays; returns (M, 3) float64 pixels."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    m = origins.shape[0]
    tn = np.zeros(m) if t_near is None else np.ascontiguousarray(t_near, dtype=np.float64)
    tf = np.full(m, 1e30) if t_far is None else np.ascontiguousarray(t_far, dtype=np.float64)
    out = np.empty((m, 3), dtype=np.float64)
    bg = cfg.background
    _kernels._render_batch(*_grid_kernel_args(grid), origins, directions, tn, tf,
                           cfg.step_world(grid.dims), 1.0 / grid.dims.voxel_diagonal,
                           cfg.early_stop_T, bg[0], bg[1], bg[2], out)
    return out


def render_ray(grid: DenseGrid, ray: Ray, cfg: RenderConfig = RenderConfig()):
    """Render one ray and return (pixel, trace of SamplePoints).

    The trace records every marched sample, including zero-density ones,
    with the compositing state (alpha, transmittance, T*alpha) the pixel
    sum actually used.  A ray that misses the grid returns the background
    color and an empty trace.
    """
    o = ray.origin[None, :]
    d = ray.direction[None, :]
    pixel = render_rays(grid, o, d, cfg,
                        t_near=np.array([ray.t_near]), t_far=np.array([ray.t_far]))[0]
    dims = grid.dims
    step = cfg.step_world(dims)
    cs = dims.cell_size
    max_n = _kernels._max_steps(dims.nx, dims.ny, dims.nz,
                                float(cs[0]), float(cs[1]), float(cs[2]), step)
    ts = np.empty(max_n)
    sigmas = np.empty(max_n)
    alphas = np.empty(max_n)
    transes = np.empty(max_n)
    cols = np.empty((max_n, 3))
    count, _, dt = _kernels._trace_ray(
        *_grid_kernel_args(grid),
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.t_near, ray.t_far, step, 1.0 / dims.voxel_diagonal,
        cfg.early_stop_T, ts, sigmas, alphas, transes, cols)
    trace = []
    for i in range(count):
        trace.append(SamplePoint(
            position=ray.origin + ts[i] * ray.direction,
            t=float(ts[i]),
            delta=float(dt / dims.voxel_diagonal),
            sigma=float(sigmas[i]),
            color=cols[i].copy(),
            alpha=float(alphas[i]),
            transmittance=float(transes[i]),
            point_importance=float(transes[i] * alphas[i]),
        ))
    return pixel, trace


def render_image(grid: DenseGrid, camera, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Render a pinhole camera view; returns (H, W, 3) float32."""
    if camera.width <= 0 or camera.height <= 0:
        raise ValueError("camera resolution must be positive")
    origins, dirs = camera_rays(camera)
    pixels = render_rays(grid, origins, dirs, cfg)
    return pixels.reshape(camera.height, camera.width, 3).astype(np.float32)


def camera_rays(camera):
    """Per-pixel ray origins and unit directions, row-major over the image.

    Rays pass through pixel centers of a pinhole camera whose pose is a
    3x4 world-from-camera matrix looking along -z, +x right, +y up.
    """
    w, h, f = camera.width, camera.height, float(camera.focal)
    pose = np.asarray(camera.pose, dtype=np.float64)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    x = (jj + 0.5 - 0.5 * w) / f
    y = -(ii + 0.5 - 0.5 * h) / f
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ pose[:, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose[:, 3], dirs.shape).copy()
    return np.ascontiguousarray(origins), np.ascontiguousarray(dirs)


def backward_batch(grid: DenseGrid, origins, directions, targets,
                   cfg: RenderConfig, d_density, d_features, touched) -> float:
    """Accumulate gradients of the summed squared pixel error of a batch.

    Returns the batch loss ``sum_r ||pixel_r - target_r||^2``.  Gradient
    buffers are caller-owned dense arrays (same dtype family as the grid);
    ``touched`` flags every voxel that received a contribution.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    m = origins.shape[0]
    tn = np.zeros(m)
    tf = np.full(m, 1e30)
    dummy = np.zeros((1, 3))
    bg = cfg.background
    return _kernels._backward_rays(
        *_grid_kernel_args(grid), origins, directions, tn, tf,
        targets, dummy, True, cfg.step_world(grid.dims),
        1.0 / grid.dims.voxel_diagonal, cfg.early_stop_T,
        bg[0], bg[1], bg[2], d_density, d_features, touched)


def render_ray_backward(grid: DenseGrid, ray: Ray, cfg: RenderConfig,
                        d_loss_d_pixel) -> SparseGradients:
    """Analytic gradients of a scalar loss through one rendered ray.

    Args:
        d_loss_d_pixel: upstream gradient of the loss w.r.t. this ray's
            rgb pixel.

    Returns:
        Nonzero partials w.r.t. raw voxel densities and feature channels,
        as coordinate lists.
    """
    n, c = grid.dims.n, grid.feature_dim
    d_density = np.zeros(n, dtype=grid.density.dtype)
    d_features = np.zeros(n * c, dtype=grid.features.dtype)
    touched = np.zeros(n, dtype=np.uint8)
    upstream = np.ascontiguousarray(d_loss_d_pixel, dtype=np.float64).reshape(1, 3)
    dummy = np.zeros((1, 3))
    bg = cfg.background
    _kernels._backward_rays(
        *_grid_kernel_args(grid),
        ray.origin[None, :], ray.direction[None, :],
        np.array([ray.t_near]), np.array([ray.t_far]),
        dummy, upstream, False, cfg.step_world(grid.dims),
        1.0 / grid.dims.voxel_diagonal, cfg.early_stop_T,
        bg[0], bg[1], bg[2], d_density, d_features, touched)
    vox = np.nonzero(touched)[0]
    dsel = vox[d_density[vox] != 0.0]
    fblock = d_features.reshape(n, c)[vox]
    frow, fch = np.nonzero(fblock)
    return SparseGradients(
        density_index=dsel,
        density_grad=d_density[dsel].astype(np.float64),
        feature_index=vox[frow],
        feature_channel=fch,
        feature_grad=fblock[frow, fch].astype(np.float64),
    )
