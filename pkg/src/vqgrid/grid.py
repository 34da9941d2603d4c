"""Voxel-grid model types shared across the toolkit.

A radiance field is stored as a dense lattice of raw densities plus
spherical-harmonic color features.  Compressed variants replace most
feature vectors with indices into a small learned codebook.  This module
holds those representations and the index arithmetic everything else
relies on, plus a small binary checkpoint format for dense grids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# Voxel class labels.
PRUNED = 0
VQ = 1
KEPT = 2

_RAWGRID_MAGIC = b"VQRG"
_RAWGRID_VERSION = 1
_RAWGRID_HEADER = struct.Struct("<4sH3IB6d")


@dataclass(frozen=True)
class GridDims:
    """Lattice resolution and the world-space box it spans.

    Voxel (i, j, k) has linear index ``i + nx*(j + ny*k)``; its center sits
    at ``aabb_min + (i+0.5) * cell_size`` per axis.
    """

    nx: int
    ny: int
    nz: int
    aabb_min: tuple = (-1.0, -1.0, -1.0)
    aabb_max: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "nz", int(self.nz))
        object.__setattr__(self, "aabb_min", tuple(float(v) for v in self.aabb_min))
        object.__setattr__(self, "aabb_max", tuple(float(v) for v in self.aabb_max))
        if min(self.nx, self.ny, self.nz) < 2:
            raise ValueError("grid needs at least 2 voxels per axis")
        if len(self.aabb_min) != 3 or len(self.aabb_max) != 3:
            raise ValueError("aabb corners must be 3-vectors")
        if not all(hi > lo for lo, hi in zip(self.aabb_min, self.aabb_max)):
            raise ValueError("aabb_max must exceed aabb_min per axis")

    @property
    def n(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def shape(self) -> tuple:
        return (self.nx, self.ny, self.nz)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.aabb_min, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.aabb_max, dtype=np.float64)

    @property
    def cell_size(self) -> np.ndarray:
        return (self.upper - self.lower) / np.array(self.shape, dtype=np.float64)

    @property
    def voxel_diagonal(self) -> float:
        return float(np.linalg.norm(self.cell_size))


def linear_index(dims: GridDims, i, j, k):
    """Map lattice coordinates to linear indices (x fastest)."""
    return i + dims.nx * (j + dims.ny * np.asarray(k))


def voxel_ijk(dims: GridDims, index):
    """Inverse of :func:`linear_index`."""
    index = np.asarray(index)
    i = index % dims.nx
    j = (index // dims.nx) % dims.ny
    k = index // (dims.nx * dims.ny)
    return i, j, k


def voxel_center(dims: GridDims, index):
    """World-space center of the voxel at ``index``.

    Args:
        dims: grid geometry.
        index: scalar or array of linear indices in ``[0, dims.n)``.

    Returns:
        (3,) vector for a scalar index, (M, 3) array otherwise.
    """
    idx = np.asarray(index)
    if idx.size and (idx.min() < 0 or idx.max() >= dims.n):
        raise ValueError("index out of grid")
    i, j, k = voxel_ijk(dims, idx)
    ijk = np.stack([i, j, k], axis=-1).astype(np.float64)
    return dims.lower + (ijk + 0.5) * dims.cell_size


def sh_feature_dim(sh_degree: int) -> int:
    """Number of feature channels: 3 color channels x (degree+1)^2 basis terms."""
    return 3 * (sh_degree + 1) ** 2


@dataclass
class DenseGrid:
    """Dense voxel radiance field: raw densities plus SH color features.

    ``density`` holds pre-activation values (rendering applies max(0, .)),
    so negative entries are legal.  ``features`` is flat, voxel-major, with
    the layout ``[r_0..r_{B-1}, g_0..g_{B-1}, b_0..b_{B-1}]`` per voxel
    where ``B = (sh_degree+1)^2``.
    """

    dims: GridDims
    sh_degree: int
    density: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.sh_degree not in (0, 1, 2):
            raise ValueError("sh_degree must be 0, 1, or 2")
        self.density = np.ascontiguousarray(self.density)
        self.features = np.ascontiguousarray(self.features)
        if self.density.shape != (self.dims.n,):
            raise ValueError("density length must equal voxel count")
        if self.features.shape != (self.dims.n * self.feature_dim,):
            raise ValueError("features length must equal voxel count x channels")

    @property
    def feature_dim(self) -> int:
        return sh_feature_dim(self.sh_degree)

    @property
    def features_2d(self) -> np.ndarray:
        """(N, C) view of the flat feature array."""
        return self.features.reshape(self.dims.n, self.feature_dim)

    @classmethod
    def zeros(cls, dims: GridDims, sh_degree: int = 2, dtype=np.float32) -> "DenseGrid":
        n = dims.n
        return cls(
            dims,
            sh_degree,
            np.zeros(n, dtype=dtype),
            np.zeros(n * sh_feature_dim(sh_degree), dtype=dtype),
        )

    def copy(self) -> "DenseGrid":
        return DenseGrid(self.dims, self.sh_degree, self.density.copy(), self.features.copy())


@dataclass
class ImportanceField:
    """Per-voxel accumulated rendering importance (non-negative)."""

    scores: np.ndarray
    total: float

    def __post_init__(self):
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        if self.scores.size and float(self.scores.min()) < 0.0:
            raise ValueError("importance scores must be non-negative")
        ref = float(self.scores.sum())
        if abs(self.total - ref) > 1e-6 * max(1.0, abs(ref)):
            raise ValueError("total does not match sum of scores")

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "ImportanceField":
        scores = np.ascontiguousarray(scores, dtype=np.float64)
        return cls(scores, float(scores.sum()))


@dataclass
class VoxelClassMask:
    """Per-voxel label: PRUNED (dropped), VQ (codebook index), or KEPT (raw)."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.size and int(self.labels.max()) > KEPT:
            raise ValueError("labels must be PRUNED, VQ, or KEPT")

    def counts(self) -> tuple:
        """(n_pruned, n_vq, n_kept), summing to the voxel count."""
        c = np.bincount(self.labels, minlength=3)
        return int(c[0]), int(c[1]), int(c[2])


@dataclass
class Codebook:
    """Learned feature centroids plus their importance capacities."""

    codes: np.ndarray
    capacity: np.ndarray

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes)
        self.capacity = np.ascontiguousarray(self.capacity, dtype=np.float64)
        if self.codes.ndim != 2:
            raise ValueError("codes must be (K, C)")
        if self.capacity.shape != (self.codes.shape[0],):
            raise ValueError("capacity length must equal code count")
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("codes must be finite")
        if self.capacity.size and float(self.capacity.min()) < 0.0:
            raise ValueError("capacities must be non-negative")

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    def copy(self) -> "Codebook":
        return Codebook(self.codes.copy(), self.capacity.copy())


@dataclass
class VQModel:
    """Compressed field: class mask, codebook, and the per-class payloads.

    ``indices`` maps VQ-labeled voxels (ascending linear index) into the
    codebook.  ``kept_features`` carries raw features of KEPT voxels and
    ``density`` the raw densities of all non-PRUNED voxels, both in
    ascending linear-index order.
    """

    dims: GridDims
    sh_degree: int
    mask: VoxelClassMask
    codebook: Codebook
    indices: np.ndarray
    kept_features: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.uint32)
        self.kept_features = np.ascontiguousarray(self.kept_features)
        self.density = np.ascontiguousarray(self.density)
        n_pruned, n_vq, n_kept = self.mask.counts()
        if self.mask.labels.shape != (self.dims.n,):
            raise ValueError("mask length must equal voxel count")
        if self.indices.shape != (n_vq,):
            raise ValueError("index stream length must equal VQ voxel count")
        if self.kept_features.shape != (n_kept * self.feature_dim,):
            raise ValueError("kept feature length must equal KEPT count x channels")
        if self.density.shape != (n_vq + n_kept,):
            raise ValueError("density length must equal non-pruned voxel count")
        if self.indices.size and int(self.indices.max()) >= self.codebook.K:
            raise ValueError("corrupt index stream")

    @property
    def feature_dim(self) -> int:
        return sh_feature_dim(self.sh_degree)


def expand_vq_model(model: VQModel) -> DenseGrid:
    """Decode a VQModel back to a dense grid.

    PRUNED voxels come back as zero density and zero features; VQ voxels
    look up their code row; KEPT voxels restore their stored features.
    """
    if model.indices.size and int(model.indices.max()) >= model.codebook.K:
        raise ValueError("corrupt index stream")
    n, c = model.dims.n, model.feature_dim
    labels = model.mask.labels
    density = np.zeros(n, dtype=np.float32)
    features = np.zeros((n, c), dtype=np.float32)
    nonpruned = labels != PRUNED
    density[nonpruned] = model.density
    vq_sel = labels == VQ
    if vq_sel.any():
        features[vq_sel] = model.codebook.codes.astype(np.float32)[model.indices]
    kept_sel = labels == KEPT
    if kept_sel.any():
        features[kept_sel] = model.kept_features.reshape(-1, c)
    return DenseGrid(model.dims, model.sh_degree, density, features.reshape(-1))


def raw_payload_nbytes(dims: GridDims, feature_dim: int) -> int:
    """Bytes of a float32 dense checkpoint payload: 4*N*(C+1)."""
    return 4 * dims.n * (feature_dim + 1)


def grid_to_bytes(grid: DenseGrid) -> bytes:
    """Serialize a DenseGrid to the VQRG checkpoint layout (float32)."""
    header = _RAWGRID_HEADER.pack(
        _RAWGRID_MAGIC,
        _RAWGRID_VERSION,
        grid.dims.nx,
        grid.dims.ny,
        grid.dims.nz,
        grid.sh_degree,
        *grid.dims.aabb_min,
        *grid.dims.aabb_max,
    )
    return (
        header
        + grid.density.astype(np.float32, copy=False).tobytes()
        + grid.features.astype(np.float32, copy=False).tobytes()
    )


def grid_from_bytes(data: bytes) -> DenseGrid:
    """Inverse of :func:`grid_to_bytes`."""
    if len(data) < _RAWGRID_HEADER.size:
        raise ValueError("truncated grid checkpoint")
    magic, version, nx, ny, nz, deg, *aabb = _RAWGRID_HEADER.unpack_from(data, 0)
    if magic != _RAWGRID_MAGIC:
        raise ValueError("bad grid checkpoint magic")
    if version != _RAWGRID_VERSION:
        raise ValueError("unsupported grid checkpoint version")
    dims = GridDims(nx, ny, nz, tuple(aabb[:3]), tuple(aabb[3:]))
    n, c = dims.n, sh_feature_dim(deg)
    need = _RAWGRID_HEADER.size + 4 * n * (c + 1)
    if len(data) < need:
        raise ValueError("truncated grid checkpoint")
    off = _RAWGRID_HEADER.size
    density = np.frombuffer(data, dtype="<f4", count=n, offset=off).copy()
    features = np.frombuffer(data, dtype="<f4", count=n * c, offset=off + 4 * n).copy()
    return DenseGrid(dims, deg, density, features)


def save_grid(grid: DenseGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(grid_to_bytes(grid))


def load_grid(path) -> DenseGrid:
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read())
