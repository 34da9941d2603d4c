"""Per-voxel importance scoring and the three-way voxel classification.

A sample's contribution weight ``T_i * alpha_i`` is scattered onto its eight
surrounding voxels with trilinear weights, accumulated over training rays.
Quantiles of the resulting field split the grid into PRUNED / VQ / KEPT
classes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import GridDims, DenseGrid, ImportanceField, VoxelClassMask, PRUNED, VQ, KEPT
from .render import RenderConfig
from .scenes import Dataset, dataset_rays

_VQIF_MAGIC = b"VQIF"
_VQIF_VERSION = 1
_VQIF_HEADER = struct.Struct("<4sH3I6d")


@dataclass(frozen=True)
class ImportanceConfig:
    """Quantile budgets and the ray coverage used to accumulate scores.

    ``rays`` is either the string ``"all"`` (every training pixel exactly
    once; deterministic and the default) or an integer count of rays drawn
    without replacement using ``seed``.
    """

    beta_p: float = 0.001
    beta_k: float = 0.6
    rays: object = "all"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta_p <= self.beta_k <= 1.0:
            raise ValueError("need 0 <= beta_p <= beta_k <= 1")
        if self.beta_p >= 1.0:
            raise ValueError("beta_p must be below 1")
        if self.rays != "all":
            if int(self.rays) != self.rays or self.rays <= 0:
                raise ValueError('rays must be "all" or a positive count')


@dataclass(frozen=True)
class Thresholds:
    """Score cutoffs bounding the VQ class from below and above."""

    theta_p: float
    theta_k: float

    def __post_init__(self):
        if not self.theta_p <= self.theta_k:
            raise ValueError("theta_p must not exceed theta_k")


def compute_importance(grid: DenseGrid, dataset: Dataset,
                       cfg: ImportanceConfig = ImportanceConfig(),
                       render_cfg: RenderConfig = RenderConfig()) -> ImportanceField:
    """Accumulate T*alpha importance over training rays.

    The march (step length, early-stop threshold) matches rendering exactly,
    so scores reflect what compositing actually uses.  Colors never enter:
    only the density grid is read.
    """
    if not dataset.images:
        raise ValueError("dataset is empty")
    if grid.dims.aabb_min != dataset.dims.aabb_min or grid.dims.aabb_max != dataset.dims.aabb_max:
        raise ValueError("grid and dataset world bounds differ")
    origins, dirs, _ = dataset_rays(dataset)
    if cfg.rays != "all":
        rng = np.random.default_rng(cfg.seed)
        count = min(int(cfg.rays), origins.shape[0])
        sel = rng.choice(origins.shape[0], size=count, replace=False)
        origins, dirs = origins[sel], dirs[sel]
    dims = grid.dims
    m = origins.shape[0]
    scores = np.zeros(dims.n, dtype=np.float64)
    cs = dims.cell_size
    _kernels._importance_batch(
        np.ascontiguousarray(grid.density, dtype=np.float64),
        dims.nx, dims.ny, dims.nz,
        float(dims.lower[0]), float(dims.lower[1]), float(dims.lower[2]),
        float(cs[0]), float(cs[1]), float(cs[2]),
        origins, dirs, np.zeros(m), np.full(m, 1e30),
        render_cfg.step_world(dims), 1.0 / dims.voxel_diagonal,
        render_cfg.early_stop_T, scores)
    return ImportanceField.from_scores(scores)


def _ascending_prefix(field: ImportanceField):
    order = np.sort(field.scores, kind="stable")
    return order, np.cumsum(order)


def cumulative_score_rate(field: ImportanceField, theta: float) -> float:
    """Fraction of total importance carried by voxels scoring strictly below theta."""
    if not field.total > 0.0:
        raise ValueError("degenerate importance field")
    ordered, prefix = _ascending_prefix(field)
    below = int(np.searchsorted(ordered, theta, side="left"))
    if below == 0:
        return 0.0
    return float(prefix[below - 1] / prefix[-1])


def quantile_threshold(field: ImportanceField, beta: float) -> float:
    """Discrete inverse of the cumulative score rate.

    Returns the score of the first voxel, in ascending score order, whose
    inclusion pushes the cumulative importance fraction above ``beta``.  The
    result theta satisfies F(theta) <= beta while the next distinct score
    above it exceeds beta; ``beta = 1`` yields +inf (no score qualifies).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if not field.total > 0.0:
        raise ValueError("degenerate importance field")
    ordered, prefix = _ascending_prefix(field)
    first = int(np.searchsorted(prefix, beta * prefix[-1], side="right"))
    if first >= ordered.size:
        return math.inf
    return float(ordered[first])


def classify_voxels(field: ImportanceField, cfg: ImportanceConfig = ImportanceConfig()):
    """Split voxels into PRUNED (< theta_p), KEPT (> theta_k), and VQ between.

    Ties at either threshold land in the VQ class.  Returns the mask together
    with the thresholds used.
    """
    theta_p = quantile_threshold(field, cfg.beta_p)
    theta_k = quantile_threshold(field, cfg.beta_k)
    labels = np.full(field.scores.shape, VQ, dtype=np.uint8)
    labels[field.scores < theta_p] = PRUNED
    labels[field.scores > theta_k] = KEPT
    return VoxelClassMask(labels), Thresholds(theta_p, theta_k)


def save_importance(path, field: ImportanceField, dims: GridDims) -> None:
    """Write an importance field sidecar (VQIF: header + float32 scores)."""
    if field.scores.shape != (dims.n,):
        raise ValueError("field size must match dims")
    header = _VQIF_HEADER.pack(_VQIF_MAGIC, _VQIF_VERSION, dims.nx, dims.ny, dims.nz,
                               *dims.aabb_min, *dims.aabb_max)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(field.scores.astype("<f4").tobytes())


def load_importance(path):
    """Read a VQIF sidecar back as (ImportanceField, GridDims)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _VQIF_HEADER.size or raw[:4] != _VQIF_MAGIC:
        raise ValueError("not a VQIF file")
    magic, version, nx, ny, nz, *aabb = _VQIF_HEADER.unpack_from(raw)
    if version != _VQIF_VERSION:
        raise ValueError("unsupported VQIF version")
    dims = GridDims(nx, ny, nz, tuple(aabb[:3]), tuple(aabb[3:]))
    scores = np.frombuffer(raw, dtype="<f4", offset=_VQIF_HEADER.size)
    if scores.size != dims.n:
        raise ValueError("VQIF payload size mismatch")
    return ImportanceField.from_scores(scores.astype(np.float64)), dims


def importance_curve(field: ImportanceField, points: int = 100) -> np.ndarray:
    """(points+1, 2) array: top x% of voxels vs. the importance % they carry."""
    if not field.total > 0.0:
        raise ValueError("degenerate importance field")
    desc = np.sort(field.scores, kind="stable")[::-1]
    prefix = np.cumsum(desc)
    n = desc.size
    out = np.zeros((points + 1, 2))
    for k in range(points + 1):
        m = int(round(n * k / points))
        out[k, 0] = 100.0 * k / points
        out[k, 1] = 100.0 * (prefix[m - 1] / prefix[-1]) if m else 0.0
    return out


def write_importance_curve(path, field: ImportanceField, points: int = 100) -> None:
    """CSV of the voxel-share vs importance-share quantile curve."""
    curve = importance_curve(field, points)
    with open(path, "w") as fh:
        fh.write("voxel_percent,importance_percent\n")
        for x, y in curve:
            fh.write(f"{float(x)!r},{float(y)!r}\n")
