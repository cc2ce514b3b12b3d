"""Command-line entry point: ``vesselnet <command> [options]``.

Relative output paths resolve under ``$VESSELNET_OUTPUT`` when it is set.
Exit status is 0 only when the command's own check passes.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from .io import output_root, read_kv, read_tensor
from .train import TrainConfig

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _out(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags given here override it")
    for f in dataclasses.fields(TrainConfig):
        p.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())


def config_from_args(args) -> TrainConfig:
    values = read_kv(args.config) if getattr(args, "config", None) else {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    cfg = TrainConfig.from_dict(values)
    cfg.validate()
    return cfg


def cmd_synth(args) -> int:
    from .data import gen_synthetic

    out = gen_synthetic(args.kind, args.count, args.seed, _out(args.out), size=args.size)
    print(f"wrote {args.count} {args.kind} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = config_from_args(args)
    res = train(cfg, out_dir=_out(args.out))
    finite = all(math.isfinite(r["loss"]) for r in res.losses)
    last = res.losses[-1]["loss"] if res.losses else float("nan")
    print(f"trained {cfg.iterations} steps, final loss {last:.6f}, checkpoint {res.checkpoint}")
    return EXIT_OK if finite else EXIT_FAIL


def cmd_eval(args) -> int:
    from .train import evaluate

    report = evaluate(args.checkpoint, data=args.data)
    text = report.to_text()
    if args.out:
        path = _out(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    sys.stdout.write(text)
    agg = report.aggregate()
    if args.min_dice is not None:
        return EXIT_OK if agg["dice"] >= args.min_dice else EXIT_FAIL
    return EXIT_OK


def cmd_predict(args) -> int:
    from .train import predict

    path = predict(args.checkpoint, args.image, _out(args.out))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import format_table, gradcheck_model, gradcheck_ops

    dtypes = ("float32", "float64") if args.dtype == "both" else (args.dtype,)
    rows = gradcheck_ops(dtypes, seed=args.seed)
    if not args.ops_only:
        rows += [gradcheck_model(dt, seed=args.seed) for dt in dtypes]
    print(format_table(rows))
    ok = all(r.passed for r in rows)
    print("gradcheck:", "pass" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench_scan(args) -> int:
    from .checks import bench_scan

    lengths = tuple(2 ** p for p in range(args.min_pow, args.max_pow + 1))
    attn = tuple(2 ** p for p in range(args.min_pow, min(args.attn_max_pow, args.max_pow) + 1))
    res = bench_scan(lengths, attn, repeats=args.repeats)
    text = res.to_text()
    if args.out:
        path = _out(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    sys.stdout.write(text)
    ok = res.passed()
    print("bench-scan:", "pass" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_dump_selective(args) -> int:
    from . import tensor as T
    from .encoder import pad_to_multiple
    from .model import SegModel
    from .ssm import dump_selective_params
    from .tensor import Tensor
    from .train import load_model
    from .vision_mamba import grid_to_tokens, tokens_to_grid

    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
    else:
        model = SegModel(config_from_args(args).model_config())
    if not model.bottleneck.layers:
        print("model has no selective-scan bottleneck", file=sys.stderr)
        return EXIT_FAIL
    image = read_tensor(args.image)
    if image.ndim == model.config.dims:
        image = image[None]
    padded, _ = pad_to_multiple(image, 2 ** model.config.depth)
    with T.no_grad():
        f = model.bottleneck_input(Tensor(padded[None].astype(model.dtype)))
        layer = model.bottleneck.layers[args.layer]
        spatial = f.shape[2:]
        grid = tokens_to_grid(layer.norm1(grid_to_tokens(f)), spatial)
    maps = dump_selective_params(layer.ss2d.blocks[0], grid, _out(args.out))
    for name, arr in maps.items():
        print(f"{name} shape={'x'.join(map(str, arr.shape))} mean={float(np.mean(arr)):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesselnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--kind", required=True, choices=("vessels2d", "vessels3d", "nuclei2d"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write log + checkpoint")
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="write the metric report here")
    p.add_argument("--min-dice", type=float, default=None, help="fail unless aggregate Dice reaches this")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a mask or instance map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient table")
    p.add_argument("--dtype", choices=("float32", "float64", "both"), default="both")
    p.add_argument("--ops-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="scan timings and fitted complexity exponent")
    p.add_argument("--min-pow", type=int, default=10)
    p.add_argument("--max-pow", type=int, default=16)
    p.add_argument("--attn-max-pow", type=int, default=13)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser("dump-selective", help="write per-location delta/B/C maps of a bottleneck layer")
    p.add_argument("--checkpoint", default=None, help="omit to use a freshly initialised model")
    _add_train_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_selective)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
