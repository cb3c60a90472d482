"""Command-line entry point.

One executable, eight subcommands:

  gen       build a dataset (geometries, grids, labels, manifest)
  train     train the surrogate on a dataset
  eval      relative-error report of a checkpoint on a dataset split
  predict   12 engineering constants for one grid file
  uq        push volume-fraction uncertainty through the surrogate
  transfer  fine-tune a checkpoint on a second dataset
  bounds    Reuss/Voigt bounds on the effective Young's modulus
  featmaps  export conv activation slices

Every command takes --config/--seed/--out; --threads (or the
VOXHOMOG_THREADS environment variable) sets the worker count where
samples can be built in parallel.  Exit codes: 0 on success, 2 for
invalid configuration or arguments, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import InvalidConfig, VoxhomogError
from .homog import (
    EffectiveProperties,
    extract_engineering_constants,
    homogenize,
    voigt_reuss_bounds,
)
from .nn.io import export_feature_maps, load_checkpoint
from .pipeline import (
    build_dataset,
    evaluate_checkpoint,
    load_manifest,
    predict_raw,
    train_on_manifest,
    transfer_train,
    uq_run,
)
from .voxel import load_grid


def _add_common(parser: argparse.ArgumentParser, out_required: bool = False) -> None:
    parser.add_argument("--config", type=Path, default=None, help="TOML or JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument(
        "--out", type=Path, required=out_required, default=None, help="output directory"
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker count (default: VOXHOMOG_THREADS or 1)",
    )


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("VOXHOMOG_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise InvalidConfig(f"VOXHOMOG_THREADS must be an integer, got {env!r}") from exc
    return None


def _run_config(args) -> RunConfig:
    return load_config(args.config, seed_override=args.seed, threads_override=_threads(args))


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _print_properties(values: np.ndarray) -> None:
    units = ["GPa"] * 6 + ["-"] * 6
    for name, value, unit in zip(EffectiveProperties.COMPONENTS, values, units):
        print(f"{name:>5s} = {value:12.6f} [{unit}]")


def cmd_gen(args) -> int:
    run = _run_config(args)
    cfg = run.dataset_config()
    run.echo(args.out)
    manifest = build_dataset(cfg, args.out, workers=run.threads)
    counts = {s: sum(1 for r in manifest.samples if r.split == s) for s in ("train", "val", "test")}
    print(f"dataset: {len(manifest.samples)} samples at {args.out}")
    print(f"splits: train={counts['train']} val={counts['val']} test={counts['test']}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    manifest = load_manifest(args.data)
    arch = run.network_arch(input_n=manifest.config.grid_n)
    cfg = run.train_config()
    run.echo(args.out)
    ckpt_path = Path(args.out) / "checkpoint.ckpt"
    _, _, log = train_on_manifest(manifest, arch, cfg, out_path=ckpt_path)
    print(f"checkpoint: {ckpt_path}")
    print(
        f"epochs run: {len(log.train_loss)}, best epoch {log.best_epoch} "
        f"(val loss {log.val_loss[log.best_epoch - 1]:.6e})"
    )
    return 0


def cmd_eval(args) -> int:
    run = _run_config(args)
    manifest = load_manifest(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate_checkpoint(ckpt, manifest, split=args.split)
    print(f"relative error on split '{args.split}' ({len(manifest.split_records(args.split))} samples):")
    for name in EffectiveProperties.COMPONENTS:
        print(f"{name:>5s}: {100.0 * report.per_component[name]:7.3f} %")
    print(f"worst modulus: {100.0 * report.moduli_max:.3f} %")
    print(f"worst Poisson: {100.0 * report.poisson_max:.3f} %")
    if args.out is not None:
        run.echo(args.out)
        _write_json(Path(args.out) / "metrics.json", report.to_json_dict())
    return 0


def cmd_predict(args) -> int:
    run = _run_config(args)
    if (args.checkpoint is None) == (not args.oracle):
        raise InvalidConfig("predict needs exactly one of --checkpoint or --oracle")
    grid = load_grid(args.grid)
    if args.oracle:
        result = homogenize(grid, run.phases, tol=run.solver_tol, max_iters=run.solver_max_iters)
        values = extract_engineering_constants(result.matrix).as_array()
        print(f"reference solve ({max(result.iterations)} CG iterations, "
              f"asymmetry {result.asymmetry:.2e}):")
    else:
        ckpt = load_checkpoint(args.checkpoint)
        values = predict_raw(ckpt, grid.values[None])[0]
        print("surrogate prediction:")
    _print_properties(values)
    if args.out is not None:
        run.echo(args.out)
        _write_json(
            Path(args.out) / "prediction.json",
            {name: float(v) for name, v in zip(EffectiveProperties.COMPONENTS, values)},
        )
    return 0


def cmd_uq(args) -> int:
    run = _run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    # Grid size follows the checkpoint unless the config pins it.
    cfg = run.uq_config(default_grid_n=ckpt.arch.input_n)
    run.echo(args.out)
    result = uq_run(ckpt, cfg, with_oracle=run.uq_oracle, workers=run.threads)
    _write_json(Path(args.out) / "uq.json", result.to_json_dict())
    print(f"uq: {cfg.n_samples} draws, vf {cfg.vf_mean:.4f} +/- {cfg.vf_sd:.4f}")
    for s in result.surrogate[:6]:
        line = f"{s.component:>5s}: surrogate mu={s.mu:9.4f} sigma={s.sigma:7.4f}"
        if result.oracle is not None:
            o = next(x for x in result.oracle if x.component == s.component)
            line += f" | reference mu={o.mu:9.4f} sigma={o.sigma:7.4f}"
        print(line)
    return 0


def cmd_transfer(args) -> int:
    run = _run_config(args)
    base = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    cfg = run.train_config()
    run.echo(args.out)
    ckpt_path = Path(args.out) / "checkpoint.ckpt"
    _, _, log = transfer_train(
        base, manifest, cfg, out_path=ckpt_path, **run.transfer_args()
    )
    print(f"checkpoint: {ckpt_path}")
    print(
        f"epochs run: {len(log.train_loss)}, best epoch {log.best_epoch} "
        f"(val loss {log.val_loss[log.best_epoch - 1]:.6e})"
    )
    return 0


def cmd_bounds(args) -> int:
    run = _run_config(args)
    if not (0.0 <= args.vf <= 1.0):
        raise InvalidConfig(f"--vf must lie in [0, 1], got {args.vf}")
    reuss, voigt = voigt_reuss_bounds(run.phases, args.vf)
    print(f"volume fraction {args.vf:.4f}:")
    print(f"  Reuss lower bound: {reuss:.3f} GPa")
    print(f"  Voigt upper bound: {voigt:.3f} GPa")
    if args.out is not None:
        run.echo(args.out)
        _write_json(
            Path(args.out) / "bounds.json",
            {"vf": args.vf, "reuss": reuss, "voigt": voigt},
        )
    return 0


def cmd_featmaps(args) -> int:
    run = _run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    grid = load_grid(args.grid)
    net = ckpt.build_network()
    run.echo(args.out)
    _, meta = export_feature_maps(
        net, grid.values, args.layer, axis=args.axis, index=args.index, out_dir=args.out
    )
    print(
        f"wrote {meta['channels']} feature-map slices (conv stage {meta['layer_index']}, "
        f"axis {meta['axis']}, plane {meta['index']}) to {args.out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxhomog",
        description="Voxel homogenization of particle composites with a 3D-CNN surrogate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="build a dataset")
    _add_common(p, out_required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the surrogate on a dataset")
    _add_common(p, out_required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="error report on a dataset split")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="constants for one grid file")
    _add_common(p)
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--oracle", action="store_true", help="use the reference solver")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("uq", help="propagate volume-fraction uncertainty")
    _add_common(p, out_required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("transfer", help="fine-tune a checkpoint on a new dataset")
    _add_common(p, out_required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="base checkpoint")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("bounds", help="Reuss/Voigt bounds at a volume fraction")
    _add_common(p)
    p.add_argument("--vf", type=float, required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("featmaps", help="export conv activation slices")
    _add_common(p, out_required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--layer", type=int, default=0, help="conv stage index")
    p.add_argument("--axis", type=int, default=2, choices=(0, 1, 2))
    p.add_argument("--index", type=int, default=None, help="plane index (default: middle)")
    p.set_defaults(func=cmd_featmaps)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (VoxhomogError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
