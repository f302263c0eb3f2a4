"""``mcc`` command line: data generation, training, reconstruction, evaluation, selftest.

Exit codes: 0 ok, 1 selftest failure, 2 usage, 3 I/O, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_TEST, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _range_pair(text: str):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    return lo, hi


def cmd_gen_data(args) -> int:
    from mcc.bundle import write_bundle
    from mcc.synthdata import SceneParams, generate_scene, object_views, render_views, scene_views

    if args.scenes < 1 or args.views < 1 or args.image_size < 1:
        raise UsageError("--scenes, --views and --image-size must be positive")
    if not 0 <= args.unknown_frac < 1:
        raise UsageError(f"--unknown-frac must lie in [0, 1), got {args.unknown_frac}")
    if args.noise < 0:
        raise UsageError(f"--noise must be non-negative, got {args.noise}")
    params = dict(mode=args.mode)
    if args.size_range:
        params["size_range"] = args.size_range
    if args.albedo_range:
        params["albedo_range"] = args.albedo_range
    try:
        params = SceneParams(**params)
        params.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(args.scenes):
        seed = args.seed + i
        scene = generate_scene(seed, params)
        if args.mode == "object":
            views = object_views(args.views, image_size=args.image_size)
        else:
            views = scene_views(args.views, image_size=args.image_size, seed=seed)
        frames = render_views(scene, views, noise=args.noise, unknown_frac=args.unknown_frac, seed=seed)
        name = f"scene_{i:04d}"
        write_bundle(out / name, frames, scene)
        lines.append(f"{name} {seed}")
    (out / "manifest.txt").write_text("# bundle seed\n" + "\n".join(lines) + "\n")
    print(f"wrote {args.scenes} bundles to {out}")
    return EXIT_OK


def cmd_init_config(args) -> int:
    from mcc.config import format_config
    from mcc.model import ModelConfig
    from mcc.train import TrainConfig

    mcfg = ModelConfig.paper() if args.preset == "paper" else ModelConfig.desk()
    text = format_config(mcfg, TrainConfig(mode=args.mode))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    from mcc.config import load_configs
    from mcc.model import ModelConfig
    from mcc.train import TrainConfig, load_scenes, train_loop

    mcfg, tcfg = load_configs(args.config, ModelConfig, TrainConfig)
    scenes = load_scenes(args.data, tcfg.mode)

    def report(step, lr, loss, occ, color):
        if not args.quiet:
            print(f"step {step} lr {lr:.3e} loss {loss:.5f} occ {occ:.5f} color {color:.5f}", flush=True)

    train_loop(scenes, tcfg, mcfg, args.out, resume=args.resume, progress=report)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from mcc.bundle import read_bundle
    from mcc.config import load_configs
    from mcc.infer import export_ply, load_model, reconstruct
    from mcc.model import ModelConfig
    from mcc.train import SceneData, TrainConfig, config_path

    if not Path(args.ckpt).exists():
        raise FileNotFoundError(f"checkpoint {args.ckpt} not found")
    if not 0 < args.threshold < 1:
        raise UsageError(f"--threshold must lie in (0, 1), got {args.threshold}")
    if not args.granularity > 0:
        raise UsageError(f"--granularity must be positive, got {args.granularity}")
    if args.chunk_size < 1:
        raise UsageError(f"--chunk-size must be positive, got {args.chunk_size}")
    _, tcfg = load_configs(config_path(args.ckpt), ModelConfig, TrainConfig)
    model = load_model(args.ckpt)
    frames, scene = read_bundle(args.bundle)
    if not 0 <= args.frame < len(frames):
        raise UsageError(f"--frame {args.frame} out of range: bundle has {len(frames)} frames")
    sd = SceneData(frames, scene, tcfg.mode)
    inputs, _, transform = sd.example(args.frame)
    rec = reconstruct(inputs, model, granularity=args.granularity, threshold=args.threshold,
                      mode=tcfg.mode, chunk_size=args.chunk_size, transform=transform)
    export_ply(rec.cloud, args.out)
    deciles = np.quantile(rec.sigma, np.linspace(0, 1, 11))
    print(f"queries {rec.n_queries}")
    print(f"points {len(rec.cloud)}")
    print("sigma deciles " + " ".join(f"{d:.4f}" for d in deciles))
    print("normalization centroid " + " ".join(f"{c!r}" for c in transform.centroid)
          + f" scale {transform.scale!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from mcc.infer import import_ply
    from mcc.metrics import evaluate

    if not args.rho > 0:
        raise UsageError(f"--rho must be positive, got {args.rho}")
    pred = import_ply(args.pred)
    gt = import_ply(args.gt)
    if len(gt) == 0:
        raise UsageError(f"{args.gt}: ground-truth cloud is empty")
    sys.stdout.write(evaluate(pred, gt, args.rho).to_csv())
    return EXIT_OK


def cmd_selftest(args) -> int:
    from mcc.selftest import run_selftest

    failures = run_selftest(verbose=not args.quiet)
    if failures:
        print("FAILED: " + ", ".join(failures), file=sys.stderr)
        return EXIT_TEST
    print("selftest passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcc", description="Single-view RGB-D to 3D occupancy and color.",
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-data", help="render synthetic scene bundles", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--scenes", type=int, default=1, help="number of scenes")
    g.add_argument("--views", type=int, default=32, help="views per scene")
    g.add_argument("--image-size", type=int, default=64, help="square image side in pixels")
    g.add_argument("--mode", choices=["object", "scene"], default="object")
    g.add_argument("--noise", type=float, default=0.0, help="depth noise std (world units)")
    g.add_argument("--unknown-frac", type=float, default=0.0, help="fraction of pixels with unknown depth")
    g.add_argument("--seed", type=int, default=0, help="seed of the first scene; scene i uses seed+i")
    g.add_argument("--size-range", type=_range_pair, default=None, help="primitive size range 'lo,hi'")
    g.add_argument("--albedo-range", type=_range_pair, default=None, help="albedo range 'lo,hi'")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("init-config", help="print a complete config file for a preset", formatter_class=fmt)
    c.add_argument("--preset", choices=["desk", "paper"], default="desk")
    c.add_argument("--mode", choices=["object", "scene"], default="object")
    c.add_argument("--out", default=None, help="write to this file instead of standard output")
    c.set_defaults(func=cmd_init_config)

    t = sub.add_parser("train", help="train a model on scene bundles", formatter_class=fmt)
    t.add_argument("--data", required=True, help="directory of bundles (manifest.txt or subdirectories)")
    t.add_argument("--config", required=True, help="key = value config file")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--quiet", action="store_true", help="no per-log-step output")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct one frame to a PLY", formatter_class=fmt)
    r.add_argument("--ckpt", required=True, help="checkpoint path")
    r.add_argument("--bundle", required=True, help="scene bundle directory")
    r.add_argument("--frame", type=int, default=0, help="input frame index")
    r.add_argument("--granularity", type=float, default=0.1, help="query grid step")
    r.add_argument("--threshold", type=float, default=0.1, help="keep points with sigma strictly above")
    r.add_argument("--chunk-size", type=int, default=2048, help="queries per decode call")
    r.add_argument("--out", required=True, help="output PLY")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="compare two PLY clouds", formatter_class=fmt)
    e.add_argument("--pred", required=True, help="predicted PLY")
    e.add_argument("--gt", required=True, help="ground-truth PLY")
    e.add_argument("--rho", type=float, default=0.1, help="distance threshold")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run gradient, mask and metric checks", formatter_class=fmt)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_selftest)
    return p


def _set_threads() -> None:
    value = os.environ.get("MCC_THREADS")
    if value is None:
        return
    import torch

    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"MCC_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"MCC_THREADS must be at least 1, got {n}")
    torch.set_num_threads(n)


def main(argv=None) -> int:
    from mcc.bundle import BundleError
    from mcc.config import ConfigError
    from mcc.infer import PlyError
    from mcc.nn import CheckpointError, NonFiniteError
    from mcc.train import NonFiniteLossError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        _set_threads()
        return args.func(args)
    except (UsageError, ConfigError, PlyError) as e:
        print(f"mcc {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, BundleError, CheckpointError) as e:
        print(f"mcc {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, NonFiniteError) as e:
        print(f"mcc {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"mcc {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
