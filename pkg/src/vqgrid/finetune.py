"""Joint finetuning of a quantized model with its code mapping frozen.

After hard assignment, three parameter groups remain live: the codebook
vectors, the raw features of KEPT voxels, and the densities of non-PRUNED
voxels.  Rendering-loss gradients reach VQ voxels through their assigned
code: per-voxel feature gradients accumulate into a per-code buffer and are
applied as the mean over contributing voxels at each sync boundary.  PRUNED
voxels stay at exactly zero density and color throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .grid import DenseGrid, Codebook, VQModel, VQ, KEPT, PRUNED, expand_vq_model
from .render import RenderConfig, backward_batch
from .scenes import Dataset, dataset_rays, evaluate_grid


@dataclass(frozen=True)
class FinetuneConfig:
    """Schedule for tuning codes, KEPT features, and densities jointly.

    Learning rates default to 0.3x the trainer's, i.e. the grid resumes at
    the midpoint of its original decay schedule.  ``sync_interval`` sets how
    many iterations of code gradients accumulate before being applied.
    """

    iterations: int = 10000
    rays_per_batch: int = 8192
    sync_interval: int = 1
    lr_density: float = 0.03
    lr_features: float = 0.006
    lr_codes: float = 0.006
    lr_decay: float = 0.3
    lr_decay_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.rays_per_batch < 1 or self.sync_interval < 1:
            raise ValueError("iterations, batch size, and sync_interval must be positive")
        if min(self.lr_density, self.lr_features, self.lr_codes) < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0.0 < self.lr_decay <= 1.0 or self.lr_decay_every < 1:
            raise ValueError("decay must lie in (0, 1] with a positive period")


@dataclass
class FinetuneResult:
    """Tuned model plus the training trace behind it."""

    model: VQModel
    train_psnr: float
    loss_history: np.ndarray


def scatter_code_gradients(feature_grads, indices, mask, K: int):
    """Route per-voxel feature gradients onto their assigned codes.

    ``feature_grads`` is the dense per-voxel gradient array ((N, C) or flat);
    only VQ-labeled rows participate.  Returns the per-code gradient sums
    together with the number of contributing voxels (rows with any nonzero
    entry); the applied update convention is ``grad_k / max(count_k, 1)``.
    """
    labels = mask.labels
    n = labels.size
    g = np.asarray(feature_grads).reshape(n, -1)
    vq_rows = np.nonzero(labels == VQ)[0]
    gv = g[vq_rows]
    live = np.any(gv != 0.0, axis=1)
    code_grads = np.zeros((K, g.shape[1]), dtype=np.float64)
    counts = np.zeros(K, dtype=np.int64)
    idx = np.asarray(indices)[live]
    np.add.at(code_grads, idx, gv[live].astype(np.float64))
    np.add.at(counts, idx, 1)
    return code_grads, counts


def joint_finetune(model: VQModel, dataset: Dataset,
                   cfg: FinetuneConfig = FinetuneConfig(),
                   render_cfg: RenderConfig = RenderConfig()) -> FinetuneResult:
    """Tune a quantized model against its training views.

    The mask and index streams are never touched.  Gradients follow the same
    dataset-total loss convention as grid fitting.  Codes are rounded to
    binary16-representable values on exit, matching their serialized form.
    """
    if not dataset.images:
        raise ValueError("dataset is empty")
    dims, c = model.dims, model.feature_dim
    n = dims.n
    labels = model.mask.labels
    vq_rows = np.nonzero(labels == VQ)[0]
    kept_rows = np.nonzero(labels == KEPT)[0]
    alive_rows = np.nonzero(labels != PRUNED)[0]

    codes = model.codebook.codes.astype(np.float32)
    view = expand_vq_model(model)
    feats2 = view.features_2d

    origins, dirs, gts = dataset_rays(dataset)
    total = origins.shape[0]
    scale = total / cfg.rays_per_batch
    rng = np.random.default_rng(cfg.seed)

    d_density = np.zeros(n, dtype=np.float32)
    d_features = np.zeros(n * c, dtype=np.float32)
    dfeat2 = d_features.reshape(n, c)
    touched = np.zeros(n, dtype=np.uint8)
    code_grads = np.zeros((codes.shape[0], c), dtype=np.float64)
    code_counts = np.zeros(codes.shape[0], dtype=np.int64)
    history = np.zeros(cfg.iterations)

    for it in range(cfg.iterations):
        decay = cfg.lr_decay ** (it // cfg.lr_decay_every)
        sel = rng.integers(0, total, size=cfg.rays_per_batch)
        loss = backward_batch(view, origins[sel], dirs[sel], gts[sel],
                              render_cfg, d_density, d_features, touched)
        history[it] = loss / (cfg.rays_per_batch * 3)
        if not math.isfinite(loss):
            raise NumericError("finetune diverged")

        tidx = np.nonzero(touched)[0]
        live_alive = tidx[labels[tidx] != PRUNED]
        view.density[live_alive] -= cfg.lr_density * decay * scale * d_density[live_alive]
        live_kept = tidx[labels[tidx] == KEPT]
        feats2[live_kept] -= cfg.lr_features * decay * scale * dfeat2[live_kept]

        live_vq = tidx[labels[tidx] == VQ]
        gv = dfeat2[live_vq]
        nz = np.any(gv != 0.0, axis=1)
        contrib = live_vq[nz]
        if contrib.size:
            pos = np.searchsorted(vq_rows, contrib)
            np.add.at(code_grads, model.indices[pos], gv[nz].astype(np.float64))
            np.add.at(code_counts, model.indices[pos], 1)

        if (it + 1) % cfg.sync_interval == 0:
            hot = code_counts > 0
            codes[hot] -= (cfg.lr_codes * decay * scale *
                           (code_grads[hot] / code_counts[hot, None])).astype(np.float32)
            code_grads[:] = 0.0
            code_counts[:] = 0
            feats2[vq_rows] = codes[model.indices]

        d_density[tidx] = 0.0
        dfeat2[tidx] = 0.0
        touched[tidx] = 0

    codes = codes.astype(np.float16).astype(np.float32)
    feats2[vq_rows] = codes[model.indices]
    tuned = VQModel(
        dims=dims,
        sh_degree=model.sh_degree,
        mask=model.mask,
        codebook=Codebook(codes, model.codebook.capacity.copy()),
        indices=model.indices.copy(),
        kept_features=feats2[kept_rows].astype(np.float32).ravel(),
        density=view.density[alive_rows].astype(np.float32),
    )
    return FinetuneResult(tuned, evaluate_grid(expand_vq_model(tuned), dataset, render_cfg),
                          history)


def write_finetune_log(path, result: FinetuneResult) -> None:
    """CSV trace of the finetune run: iteration, batch loss, batch PSNR."""
    with open(path, "w") as fh:
        fh.write("iteration,loss,batch_psnr\n")
        for it, loss in enumerate(result.loss_history):
            p = min(99.0, -10.0 * math.log10(loss)) if loss > 0 else 99.0
            fh.write(f"{it},{float(loss)!r},{float(p)!r}\n")
