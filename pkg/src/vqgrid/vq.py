"""Importance-weighted trainable vector quantization of voxel features.

The codebook is fit by iterated weighted clustering on sampled voxel
batches: nearest-code assignment, an exponential-moving-average code update
weighted by voxel importance, and expiration of rarely used codes.  Voxel
importance both seeds the codebook and weights every update, steering code
capacity toward the features that matter for rendering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import DenseGrid, ImportanceField, VoxelClassMask, Codebook, VQModel, PRUNED, VQ, KEPT


@dataclass(frozen=True)
class VQConfig:
    """Codebook size and clustering-loop settings."""

    K: int = 4096
    init_iters: int = 100
    batch_voxels: int = 10000
    lambda_d: float = 0.8
    expire_J: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if not 0.0 < self.lambda_d < 1.0:
            raise ValueError("lambda_d must lie in (0, 1)")
        if not 0 <= self.expire_J < self.K:
            raise ValueError("expire_J must lie in [0, K)")
        if self.init_iters < 0 or self.batch_voxels < 1:
            raise ValueError("init_iters must be >= 0 and batch_voxels >= 1")


def compression_rate(N: int, C: int, K: int) -> float:
    """Ratio of raw 16-bit feature storage to index-plus-codebook storage.

    ``r = 16*N*C / (N*log2(K) + 16*K*C)`` for N voxels of C channels
    quantized against K codes.  Grows toward ``16*C/log2(K)`` as N grows.
    """
    if N <= 0 or C <= 0:
        raise ValueError("N and C must be positive")
    if K < 2:
        raise ValueError("K must be at least 2")
    return 16.0 * N * C / (N * math.log2(K) + 16.0 * K * C)


def assign(features, codebook: Codebook) -> np.ndarray:
    """Nearest code (squared Euclidean) per feature row; ties to lowest index."""
    if codebook.K == 0:
        raise ValueError("empty codebook")
    u = np.ascontiguousarray(features, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError("features must be (M, C)")
    b = codebook.codes.astype(np.float64)
    if u.shape[1] != b.shape[1]:
        raise ValueError("feature width must match codebook")
    if u.shape[0] == 0:
        return np.zeros(0, dtype=np.uint32)
    d = (u * u).sum(axis=1)[:, None] - 2.0 * (u @ b.T) + (b * b).sum(axis=1)[None, :]
    return np.argmin(d, axis=1).astype(np.uint32)


def ema_update(codebook: Codebook, features, importance, assignments,
               lambda_d: float) -> Codebook:
    """One moving-average code update from an assigned batch.

    Each code relaxes toward its cluster's importance-weighted mean:
    ``b_k <- lambda_d * b_k + (1 - lambda_d) * mean_k``.  Capacities track
    the same moving average of per-cluster importance mass, so codes that
    stop attracting voxels decay toward zero capacity.  Clusters that are
    empty (or carry zero total importance) leave their code unchanged.
    """
    k, c = codebook.codes.shape
    a = np.asarray(assignments)
    if a.size and (a.min() < 0 or a.max() >= k):
        raise ValueError("assignment out of codebook range")
    u = np.ascontiguousarray(features, dtype=np.float64).reshape(a.size, c)
    imps = np.ascontiguousarray(importance, dtype=np.float64).reshape(a.size)
    wsum = np.zeros(k)
    vsum = np.zeros((k, c))
    np.add.at(wsum, a, imps)
    np.add.at(vsum, a, imps[:, None] * u)
    codes = codebook.codes.astype(np.float64)
    live = wsum > 0.0
    codes[live] = lambda_d * codes[live] + (1.0 - lambda_d) * (vsum[live] / wsum[live, None])
    capacity = lambda_d * codebook.capacity + (1.0 - lambda_d) * wsum
    return Codebook(codes.astype(codebook.codes.dtype), capacity)


def expire_codes(codebook: Codebook, features, importance, J: int) -> Codebook:
    """Replace the J lowest-capacity codes with the batch's top-J voxels.

    The lowest-capacity code receives the most important voxel's feature (and
    its importance as fresh capacity), the next-lowest the second most
    important, and so on.  Capacity ties resolve to the lower code index,
    importance ties to the lower voxel index.  ``J = 0`` is the identity.
    """
    if not 0 <= J < codebook.K:
        raise ValueError("J must lie in [0, K)")
    out = codebook.copy()
    if J == 0:
        return out
    u = np.ascontiguousarray(features, dtype=np.float64)
    imps = np.ascontiguousarray(importance, dtype=np.float64).reshape(u.shape[0])
    if u.shape[0] < J:
        raise ValueError("batch smaller than J")
    victims = np.argsort(codebook.capacity, kind="stable")[:J]
    donors = np.argsort(-imps, kind="stable")[:J]
    out.codes[victims] = u[donors].astype(out.codes.dtype)
    out.capacity[victims] = imps[donors]
    return out


def weighted_wcss(features, importance, codebook: Codebook) -> float:
    """Importance-weighted within-cluster sum of squares under nearest codes."""
    u = np.ascontiguousarray(features, dtype=np.float64)
    imps = np.ascontiguousarray(importance, dtype=np.float64).reshape(u.shape[0])
    if u.shape[0] == 0:
        return 0.0
    picked = codebook.codes.astype(np.float64)[assign(u, codebook)]
    return float((((u - picked) ** 2).sum(axis=1) * imps).sum())


def _seed_codes(feats, imps, K, rng):
    """Importance-weighted seeding without replacement (uniform fallback)."""
    m = feats.shape[0]
    total = float(imps.sum())
    positive = int(np.count_nonzero(imps))
    if total > 0.0 and positive >= K:
        idx = rng.choice(m, size=K, replace=False, p=imps / total)
    elif total > 0.0:
        # Too few carriers: take every positive-importance voxel, then fill
        # uniformly from the zero-importance remainder.
        pos = np.nonzero(imps)[0]
        rest = np.nonzero(imps == 0.0)[0]
        fill = rng.choice(rest.size, size=K - pos.size, replace=False)
        idx = np.concatenate([pos, rest[fill]])
    else:
        idx = rng.choice(m, size=K, replace=False)
    return idx


def init_codebook(grid: DenseGrid, field: ImportanceField, mask: VoxelClassMask,
                  cfg: VQConfig = VQConfig()) -> Codebook:
    """Fit a codebook to the VQ-labeled voxels of a grid.

    Codes are seeded by importance-weighted sampling without replacement,
    then refined for ``init_iters`` rounds of {uniform batch, assign,
    ema_update, expire_codes}.  Only VQ-labeled voxels participate.  The
    returned codes are rounded to binary16-representable values, matching
    how they are later serialized.
    """
    vq_idx = np.nonzero(mask.labels == VQ)[0]
    if vq_idx.size < cfg.K:
        raise ValueError("codebook larger than population")
    feats = grid.features_2d[vq_idx].astype(np.float64)
    imps = field.scores[vq_idx]
    rng = np.random.default_rng(cfg.seed)
    seed_idx = _seed_codes(feats, imps, cfg.K, rng)
    book = Codebook(feats[seed_idx].astype(np.float32), imps[seed_idx])
    for _ in range(cfg.init_iters):
        batch = rng.integers(0, vq_idx.size, size=cfg.batch_voxels)
        bf, bi = feats[batch], imps[batch]
        a = assign(bf, book)
        book = ema_update(book, bf, bi, a, cfg.lambda_d)
        book = expire_codes(book, bf, bi, cfg.expire_J)
    book.codes = book.codes.astype(np.float16).astype(np.float32)
    return book


def build_vq_model(grid: DenseGrid, mask: VoxelClassMask, codebook: Codebook) -> VQModel:
    """Freeze the voxel-to-code mapping and gather the per-class payloads.

    VQ voxels store only their nearest-code index; KEPT voxels keep raw
    features; every non-PRUNED voxel keeps its raw density.  All streams are
    in ascending linear-voxel order.
    """
    book = Codebook(codebook.codes.astype(np.float16).astype(np.float32),
                    codebook.capacity.copy())
    feats2 = grid.features_2d
    vq_idx = np.nonzero(mask.labels == VQ)[0]
    kept_idx = np.nonzero(mask.labels == KEPT)[0]
    alive_idx = np.nonzero(mask.labels != PRUNED)[0]
    return VQModel(
        dims=grid.dims,
        sh_degree=grid.sh_degree,
        mask=mask,
        codebook=book,
        indices=assign(feats2[vq_idx], book),
        kept_features=feats2[kept_idx].astype(np.float32).ravel(),
        density=grid.density[alive_idx].astype(np.float32),
    )
