"""Command-line front end for the grid-compression pipeline.

Subcommands mirror the pipeline stages: gen-scene, train, compress,
decompress, render, eval, report.  Exit codes: 0 success, 1 usage error,
2 bad or missing data, 3 numeric failure during optimization.
"""

import argparse
import os
import sys
from dataclasses import replace

from . import pipeline
from .container import ContainerError
from .errors import NumericError


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; this tool uses 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(parser) -> None:
    parser.add_argument("--config", metavar="PATH",
                        help="JSON pipeline config (default: <out>/config.json "
                             "if present, else built-in toy defaults)")
    parser.add_argument("--out", metavar="DIR", default="out",
                        help="artifact directory (default: out)")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="override the global seed")
    parser.add_argument("--threads", type=int, metavar="N",
                        help="reserved; the current kernels are single-threaded")


def _add_stage_overrides(parser) -> None:
    parser.add_argument("--beta-p", type=float, metavar="B",
                        help="prune quantile override")
    parser.add_argument("--beta-k", type=float, metavar="B",
                        help="keep quantile override")
    parser.add_argument("--codebook-size", type=int, metavar="K",
                        help="codebook entry count override")
    parser.add_argument("--finetune-iters", type=int, metavar="N",
                        help="joint finetune iteration override")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqgrid",
                     description="Fit, compress, and evaluate voxel radiance "
                                 "fields on procedurally generated scenes.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-scene", help="write the scene and its train/test views")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("train", help="fit a dense grid to the training views")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compress", help="prune, quantize, finetune, and pack "
                                        "the fitted grid")
    _add_common(p)
    _add_stage_overrides(p)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("decompress", help="decode the container to a dense grid")
    _add_common(p)
    p.set_defaults(func=_cmd_decompress)

    p = sub.add_parser("render", help="render a camera ring from the container "
                                      "(or the fitted grid)")
    _add_common(p)
    p.add_argument("--split", choices=("train", "test"), default="test",
                   help="camera ring to render (default: test)")
    p.add_argument("--format", choices=("ppm", "vqim"), default="ppm",
                   help="image format (default: ppm)")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="PSNR of decoded renders vs held-out views")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="rate-distortion sweeps over K and the "
                                      "quantiles")
    _add_common(p)
    _add_stage_overrides(p)
    p.set_defaults(func=_cmd_report)

    return parser


def _resolve_config(args) -> pipeline.PipelineConfig:
    """Load the config (explicit path > saved copy > defaults) and apply flags."""
    if args.config:
        cfg = pipeline.load_config(args.config)
    else:
        saved = pipeline.Workspace(args.out).config
        cfg = pipeline.load_config(saved) if os.path.exists(saved) else pipeline.default_config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "beta_p", None) is not None:
        cfg = replace(cfg, importance=replace(cfg.importance, beta_p=args.beta_p))
    if getattr(args, "beta_k", None) is not None:
        cfg = replace(cfg, importance=replace(cfg.importance, beta_k=args.beta_k))
    if getattr(args, "codebook_size", None) is not None:
        cfg = replace(cfg, vq=replace(cfg.vq, K=args.codebook_size))
    if getattr(args, "finetune_iters", None) is not None:
        cfg = replace(cfg, finetune=replace(cfg.finetune, iterations=args.finetune_iters))
    return cfg


def _cmd_gen_scene(cfg, args) -> None:
    train_ds, test_ds = pipeline.run_gen_scene(cfg, args.out)
    print(f"wrote {len(train_ds.images)} train and {len(test_ds.images)} test "
          f"views under {args.out}")


def _cmd_train(cfg, args) -> None:
    result = pipeline.run_train(cfg, args.out)
    print(f"train PSNR {result.train_psnr:.2f} dB")


def _cmd_compress(cfg, args) -> None:
    result = pipeline.run_compress(cfg, args.out)
    for row in result.stages:
        print(f"{row.stage}: {row.nbytes} bytes, {row.psnr:.2f} dB")


def _cmd_decompress(cfg, args) -> None:
    grid = pipeline.run_decompress(args.out)
    print(f"decoded {grid.dims.nx}x{grid.dims.ny}x{grid.dims.nz} grid to "
          f"{pipeline.Workspace(args.out).decoded}")


def _cmd_render(cfg, args) -> None:
    paths = pipeline.run_render(cfg, args.out, args.split, args.format)
    print(f"wrote {len(paths)} {args.format} images to {paths[0].parent}")


def _cmd_eval(cfg, args) -> None:
    value = pipeline.run_eval(cfg, args.out)
    print(f"PSNR {value:.2f} dB")


def _cmd_report(cfg, args) -> None:
    pipeline.run_report(cfg, args.out)
    ws = pipeline.Workspace(args.out)
    print(f"wrote {ws.sweep_codebook} and {ws.sweep_quantiles}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        args.func(cfg, args)
    except NumericError as exc:
        print(f"vqgrid: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError, ContainerError) as exc:
        print(f"vqgrid: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
