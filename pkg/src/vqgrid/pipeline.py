"""End-to-end orchestration: scene synthesis, fitting, compression, reports.

One global seed drives every stage through ``SeedSequence`` derivations,
and all artifacts land in a single output directory under fixed names, so
two runs with the same config produce byte-identical files.  The stage
report sizes each checkpoint after DEFLATE (the container's own entropy
coder) so the raw/pruned/VQ/container columns are directly comparable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import _deflate, decode_container, encode_container, write_size_breakdown
from .finetune import FinetuneConfig, joint_finetune, write_finetune_log
from .grid import (PRUNED, VQ, DenseGrid, GridDims, VQModel, expand_vq_model,
                   grid_to_bytes, load_grid, save_grid)
from .images import psnr, write_ppm, write_vqim
from .importance import (ImportanceConfig, Thresholds, classify_voxels,
                         compute_importance, save_importance,
                         write_importance_curve)
from .render import RenderConfig, render_image
from .scenes import (FitResult, Primitive, SceneSpec, TrainConfig,
                     evaluate_grid, fit_grid, generate_cameras, load_dataset,
                     render_dataset, save_dataset, save_scene, scene_from_json,
                     scene_to_json)
from .vq import VQConfig, build_vq_model, compression_rate, init_codebook

DEFAULT_TOY_SCENE = SceneSpec(
    primitives=(
        Primitive("sphere", (-0.25, 0.1, 0.0), 0.45, (0.85, 0.3, 0.25), 80.0),
        Primitive("box", (0.45, -0.35, 0.25), (0.4, 0.4, 0.4), (0.25, 0.5, 0.9), 60.0),
        Primitive("sphere", (0.35, 0.45, -0.3), 0.22, (0.95, 0.85, 0.3), 100.0),
    ),
    background=(1.0, 1.0, 1.0),
)

SWEEP_BETA_P = (0.0, 0.001, 0.01, 0.1)
SWEEP_BETA_K = (0.0, 0.3, 0.6, 0.9)
SWEEP_CODEBOOK_SIZES = (16, 64, 256, 1024, 4096)

_STAGES = {
    "train_cameras": 0,
    "test_cameras": 1,
    "fit": 2,
    "importance": 3,
    "vq": 4,
    "finetune": 5,
}


def stage_seed(seed: int, stage: str) -> int:
    """Seed for one stage's RNG, derived stably from the global seed."""
    if stage not in _STAGES:
        raise ValueError(f"unknown stage: {stage}")
    seq = np.random.SeedSequence((seed, _STAGES[stage]))
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ViewConfig:
    """Camera counts and intrinsics for the train and held-out test rings."""

    train: int = 40
    test: int = 8
    width: int = 100
    height: int = 100
    focal: float = 70.0
    radius: float = 3.2

    def __post_init__(self):
        if min(self.train, self.test, self.width, self.height) < 1:
            raise ValueError("view counts and image sizes must be positive")
        if self.focal <= 0 or self.radius <= 0:
            raise ValueError("focal and radius must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run needs: scene, grid shape, and per-stage settings.

    Stage seeds are not stored here; they are derived from the single
    ``seed`` field via :func:`stage_seed` when each stage runs.
    """

    scene: SceneSpec = field(default_factory=lambda: DEFAULT_TOY_SCENE)
    dims: GridDims = field(default_factory=lambda: GridDims(
        64, 64, 64, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)))
    sh_degree: int = 2
    views: ViewConfig = field(default_factory=ViewConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)
    vq: VQConfig = field(default_factory=lambda: VQConfig(K=256))
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(iterations=2000))
    render: RenderConfig = field(default_factory=RenderConfig)
    seed: int = 0

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.sh_degree not in (0, 1, 2):
            raise ValueError("sh_degree must be 0, 1, or 2")


def default_config() -> PipelineConfig:
    """Toy-scale defaults: 64^3 grid, degree-2 SH, 40 views, K = 256."""
    return PipelineConfig()


class Workspace:
    """Fixed artifact filenames under one output directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.config = self.root / "config.json"
        self.scene = self.root / "scene.json"
        self.train_dir = self.root / "train"
        self.test_dir = self.root / "test"
        self.grid = self.root / "grid.vqrg"
        self.train_log = self.root / "train_log.csv"
        self.importance = self.root / "importance.vqif"
        self.importance_curve = self.root / "importance_curve.csv"
        self.pruned = self.root / "pruned.vqrg"
        self.vq_checkpoint = self.root / "vq_model.bin"
        self.finetuned_checkpoint = self.root / "finetuned_model.bin"
        self.container = self.root / "model.vqrf"
        self.stage_report = self.root / "stage_report.csv"
        self.finetune_log = self.root / "finetune_log.csv"
        self.size_breakdown = self.root / "size_breakdown.csv"
        self.decoded = self.root / "decoded.vqrg"
        self.eval_report = self.root / "eval.csv"
        self.sweep_codebook = self.root / "sweep_codebook.csv"
        self.sweep_quantiles = self.root / "sweep_quantiles.csv"

    def renders_dir(self, split: str) -> Path:
        return self.root / f"renders_{split}"


def _fmt_cell(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# config (de)serialization


def _merge_fields(default, obj: dict, label: str):
    """Overlay a JSON dict onto a config dataclass, rejecting stray keys."""
    names = {f.name for f in dataclasses.fields(type(default))}
    for key in obj:
        if key == "seed":
            raise ValueError(
                "stage seeds derive from the global seed; set 'seed' at the top level")
        if key not in names:
            raise ValueError(f"unknown {label} config key: {key}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    return replace(default, **kwargs)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """JSON-ready form of a config (the schema ``load_config`` reads)."""
    def fields_of(dc, drop=("seed",)):
        out = {}
        for f in dataclasses.fields(type(dc)):
            if f.name in drop:
                continue
            v = getattr(dc, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    return {
        "seed": cfg.seed,
        "grid": {
            "shape": list(cfg.dims.shape),
            "aabb_min": list(cfg.dims.aabb_min),
            "aabb_max": list(cfg.dims.aabb_max),
            "sh_degree": cfg.sh_degree,
        },
        "views": fields_of(cfg.views),
        "scene": scene_to_json(cfg.scene),
        "train": fields_of(cfg.train),
        "importance": fields_of(cfg.importance),
        "vq": fields_of(cfg.vq),
        "finetune": fields_of(cfg.finetune),
        "render": fields_of(cfg.render, drop=("sigma_activation", "color_transform")),
    }


def config_from_dict(obj: dict, base_dir=None) -> PipelineConfig:
    """Build a config from parsed JSON, overlaying the toy defaults.

    ``scene`` (inline) wins over ``scene_path`` (resolved against
    ``base_dir``, normally the config file's directory).  Unknown keys are
    rejected so typos fail loudly instead of silently using defaults.
    """
    known = {"seed", "grid", "views", "scene", "scene_path", "train",
             "importance", "vq", "finetune", "render"}
    for key in obj:
        if key not in known:
            raise ValueError(f"unknown config key: {key}")
    cfg = default_config()
    if "seed" in obj:
        cfg = replace(cfg, seed=int(obj["seed"]))
    if "grid" in obj:
        g = dict(obj["grid"])
        for key in g:
            if key not in {"shape", "aabb_min", "aabb_max", "sh_degree"}:
                raise ValueError(f"unknown grid config key: {key}")
        shape = g.get("shape", list(cfg.dims.shape))
        if len(shape) != 3:
            raise ValueError("grid shape must have three entries")
        dims = GridDims(int(shape[0]), int(shape[1]), int(shape[2]),
                        tuple(g.get("aabb_min", cfg.dims.aabb_min)),
                        tuple(g.get("aabb_max", cfg.dims.aabb_max)))
        cfg = replace(cfg, dims=dims, sh_degree=int(g.get("sh_degree", cfg.sh_degree)))
    if "views" in obj:
        cfg = replace(cfg, views=_merge_fields(cfg.views, obj["views"], "views"))
    if "scene" in obj:
        cfg = replace(cfg, scene=scene_from_json(obj["scene"]))
    elif "scene_path" in obj:
        path = Path(obj["scene_path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        with open(path) as fh:
            cfg = replace(cfg, scene=scene_from_json(json.load(fh)))
    if "train" in obj:
        cfg = replace(cfg, train=_merge_fields(cfg.train, obj["train"], "train"))
    if "importance" in obj:
        cfg = replace(cfg, importance=_merge_fields(cfg.importance, obj["importance"],
                                                    "importance"))
    if "vq" in obj:
        cfg = replace(cfg, vq=_merge_fields(cfg.vq, obj["vq"], "vq"))
    if "finetune" in obj:
        cfg = replace(cfg, finetune=_merge_fields(cfg.finetune, obj["finetune"],
                                                  "finetune"))
    if "render" in obj:
        cfg = replace(cfg, render=_merge_fields(cfg.render, obj["render"], "render"))
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        obj = json.load(fh)
    return config_from_dict(obj, base_dir=Path(path).parent)


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages


def run_gen_scene(cfg: PipelineConfig, out):
    """Write the scene, its resolved config, and train/test datasets."""
    ws = Workspace(out)
    ws.root.mkdir(parents=True, exist_ok=True)
    save_config(cfg, ws.config)
    save_scene(cfg.scene, ws.scene)
    train_cams = generate_cameras(
        cfg.views.train, cfg.views.radius, width=cfg.views.width,
        height=cfg.views.height, focal=cfg.views.focal,
        seed=stage_seed(cfg.seed, "train_cameras"))
    test_cams = generate_cameras(
        cfg.views.test, cfg.views.radius, width=cfg.views.width,
        height=cfg.views.height, focal=cfg.views.focal,
        seed=stage_seed(cfg.seed, "test_cameras"))
    train_ds = render_dataset(cfg.scene, train_cams, cfg.dims, cfg.render)
    test_ds = render_dataset(cfg.scene, test_cams, cfg.dims, cfg.render)
    save_dataset(train_ds, ws.train_dir)
    save_dataset(test_ds, ws.test_dir)
    return train_ds, test_ds


def run_train(cfg: PipelineConfig, out) -> FitResult:
    """Fit the dense grid to the cached training views and save it."""
    ws = Workspace(out)
    dataset = load_dataset(ws.train_dir)
    tcfg = replace(cfg.train, seed=stage_seed(cfg.seed, "fit"))
    result = fit_grid(dataset, cfg.dims, cfg.sh_degree, tcfg, cfg.render)
    save_grid(result.grid, ws.grid)
    _write_csv(ws.train_log, "iteration,loss",
               ((i, float(v)) for i, v in enumerate(result.loss_history)))
    return result


def _pruned_grid(grid: DenseGrid, mask) -> DenseGrid:
    """Copy of the grid with PRUNED voxels zeroed, density and features."""
    out = grid.copy()
    dead = mask.labels == PRUNED
    out.density[dead] = 0.0
    out.features_2d[dead] = 0.0
    return out


def model_checkpoint_bytes(model: VQModel) -> bytes:
    """Flat stage-checkpoint serialization (mask, payloads, codes, indices).

    This is the sizing/debugging artifact for the stage report, not the
    interchange container: streams are stored raw and unpacked.
    """
    return b"".join((
        model.mask.labels.astype(np.uint8).tobytes(),
        model.density.astype("<f4").tobytes(),
        model.kept_features.astype("<f4").tobytes(),
        model.codebook.codes.astype("<f2").tobytes(),
        model.indices.astype("<u4").tobytes(),
    ))


@dataclass(frozen=True)
class StageRow:
    """One stage-report line: checkpoint size and held-out quality."""

    stage: str
    nbytes: int
    psnr: float


@dataclass
class CompressResult:
    """Everything cmd_compress produced, for callers that want the objects."""

    field: object
    thresholds: Thresholds
    mask: object
    model: VQModel
    container: bytes
    stages: list


def run_compress(cfg: PipelineConfig, out) -> CompressResult:
    """Prune, quantize, finetune, and pack the fitted grid into a container.

    Emits per-stage checkpoints plus a stage report whose sizes are the
    DEFLATEd checkpoint bytes and whose PSNR column is measured against
    the held-out test views.
    """
    ws = Workspace(out)
    grid = load_grid(ws.grid)
    train_ds = load_dataset(ws.train_dir)
    test_ds = load_dataset(ws.test_dir)

    icfg = replace(cfg.importance, seed=stage_seed(cfg.seed, "importance"))
    importance = compute_importance(grid, train_ds, icfg, cfg.render)
    save_importance(ws.importance, importance, grid.dims)
    write_importance_curve(ws.importance_curve, importance)
    mask, thresholds = classify_voxels(importance, icfg)

    stages = [StageRow("raw", len(_deflate(grid_to_bytes(grid))),
                       evaluate_grid(grid, test_ds, cfg.render))]

    pruned = _pruned_grid(grid, mask)
    save_grid(pruned, ws.pruned)
    stages.append(StageRow("pruned", len(_deflate(grid_to_bytes(pruned))),
                           evaluate_grid(pruned, test_ds, cfg.render)))

    vcfg = replace(cfg.vq, seed=stage_seed(cfg.seed, "vq"))
    codebook = init_codebook(grid, importance, mask, vcfg)
    model = build_vq_model(grid, mask, codebook)
    checkpoint = model_checkpoint_bytes(model)
    ws.vq_checkpoint.write_bytes(checkpoint)
    stages.append(StageRow("vq", len(_deflate(checkpoint)),
                           evaluate_grid(expand_vq_model(model), test_ds, cfg.render)))

    fcfg = replace(cfg.finetune, seed=stage_seed(cfg.seed, "finetune"))
    tuned = joint_finetune(model, train_ds, fcfg, cfg.render)
    write_finetune_log(ws.finetune_log, tuned)
    checkpoint = model_checkpoint_bytes(tuned.model)
    ws.finetuned_checkpoint.write_bytes(checkpoint)
    stages.append(StageRow("finetuned", len(_deflate(checkpoint)),
                           evaluate_grid(expand_vq_model(tuned.model), test_ds,
                                         cfg.render)))

    blob = encode_container(tuned.model, beta_p=icfg.beta_p, beta_k=icfg.beta_k)
    ws.container.write_bytes(blob)
    write_size_breakdown(ws.size_breakdown, blob)
    decoded = expand_vq_model(decode_container(blob))
    stages.append(StageRow("container", len(blob),
                           evaluate_grid(decoded, test_ds, cfg.render)))

    _write_csv(ws.stage_report, "stage,bytes,psnr",
               ((s.stage, s.nbytes, s.psnr) for s in stages))
    return CompressResult(importance, thresholds, mask, tuned.model, blob, stages)


def run_decompress(out) -> DenseGrid:
    """Decode the container back to a dense grid and save it."""
    ws = Workspace(out)
    grid = expand_vq_model(decode_container(ws.container.read_bytes()))
    save_grid(grid, ws.decoded)
    return grid


def run_render(cfg: PipelineConfig, out, split: str = "test",
               image_format: str = "ppm") -> list:
    """Render one camera ring from the container (or the raw fitted grid).

    The decoded container is preferred when present so renders show what a
    consumer of the ``.vqrf`` file would see; before compression has run,
    the fitted grid is used instead.
    """
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    if image_format not in ("ppm", "vqim"):
        raise ValueError("image format must be 'ppm' or 'vqim'")
    ws = Workspace(out)
    dataset = load_dataset(ws.test_dir if split == "test" else ws.train_dir)
    if ws.container.exists():
        grid = expand_vq_model(decode_container(ws.container.read_bytes()))
    else:
        grid = load_grid(ws.grid)
    dest = ws.renders_dir(split)
    dest.mkdir(parents=True, exist_ok=True)
    writer = write_ppm if image_format == "ppm" else write_vqim
    paths = []
    for i, cam in enumerate(dataset.cameras):
        image = render_image(grid, cam, cfg.render)
        path = dest / f"view_{i:04d}.{image_format}"
        writer(image, path)
        paths.append(path)
    return paths


def run_eval(cfg: PipelineConfig, out) -> float:
    """PSNR of decoded-container renders against the held-out test views."""
    ws = Workspace(out)
    test_ds = load_dataset(ws.test_dir)
    grid = expand_vq_model(decode_container(ws.container.read_bytes()))
    renders = [render_image(grid, cam, cfg.render) for cam in test_ds.cameras]
    per_view = [psnr(img, gt) for img, gt in zip(renders, test_ds.images)]
    pooled = psnr(np.stack(renders), np.stack(test_ds.images))
    rows = [(i, v) for i, v in enumerate(per_view)]
    rows.append(("all", pooled))
    _write_csv(ws.eval_report, "view,psnr", rows)
    return pooled


def run_report(cfg: PipelineConfig, out, *, betas_p=SWEEP_BETA_P,
               betas_k=SWEEP_BETA_K, codebook_sizes=SWEEP_CODEBOOK_SIZES) -> None:
    """Rate-distortion sweeps over codebook size and the two quantiles.

    Each cell re-runs classify -> codebook -> finetune -> container on the
    already-fitted grid and records the container size plus held-out PSNR.
    Quantile pairs with ``beta_p > beta_k`` violate the threshold ordering
    and are skipped, as are degenerate cells whose middle (VQ) class has
    fewer voxels than the codebook wants.
    """
    ws = Workspace(out)
    grid = load_grid(ws.grid)
    train_ds = load_dataset(ws.train_dir)
    test_ds = load_dataset(ws.test_dir)
    icfg = replace(cfg.importance, seed=stage_seed(cfg.seed, "importance"))
    importance = compute_importance(grid, train_ds, icfg, cfg.render)

    def cell(cell_icfg, K):
        mask, _ = classify_voxels(importance, cell_icfg)
        vcfg = replace(cfg.vq, K=K, seed=stage_seed(cfg.seed, "vq"))
        try:
            codebook = init_codebook(grid, importance, mask, vcfg)
        except ValueError as exc:
            if "population" not in str(exc):
                raise
            return None
        model = build_vq_model(grid, mask, codebook)
        fcfg = replace(cfg.finetune, seed=stage_seed(cfg.seed, "finetune"))
        tuned = joint_finetune(model, train_ds, fcfg, cfg.render)
        blob = encode_container(tuned.model, beta_p=cell_icfg.beta_p,
                                beta_k=cell_icfg.beta_k)
        decoded = expand_vq_model(decode_container(blob))
        return mask, blob, evaluate_grid(decoded, test_ds, cfg.render)

    k_rows = []
    for K in codebook_sizes:
        got = cell(icfg, K)
        if got is None:
            continue
        mask, blob, quality = got
        n_vq = int(np.count_nonzero(mask.labels == VQ))
        k_rows.append((K, len(blob), quality,
                       compression_rate(n_vq, grid.feature_dim, K)))
    _write_csv(ws.sweep_codebook, "K,bytes,psnr,rate", k_rows)

    beta_rows = []
    for beta_p in betas_p:
        for beta_k in betas_k:
            if beta_p > beta_k:
                continue
            got = cell(replace(icfg, beta_p=beta_p, beta_k=beta_k), cfg.vq.K)
            if got is None:
                continue
            _, blob, quality = got
            beta_rows.append((beta_p, beta_k, len(blob), quality))
    _write_csv(ws.sweep_quantiles, "beta_p,beta_k,bytes,psnr", beta_rows)
