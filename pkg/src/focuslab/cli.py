"""Command-line entry point: ``focuslab {synth,run,bench,train,eval-stack}``."""
import argparse
import logging
from pathlib import Path
import sys

from . import bench
from .camera import StackFormatError, load_stack, save_stack, synthetic_stack
from .metrics import count_local_maxima, normalize_curve
from .optics import LensConfig


def _synth(args):
    lens = LensConfig()
    out = Path(args.out)
    for i in range(args.count):
        stack = synthetic_stack(args.seed + i, lens=lens, size=args.size, n_positions=args.positions)
        target = out if args.count == 1 else out / f"stack_{i:03d}"
        save_stack(stack, target)
        print(f"wrote {target} ({len(stack)} frames, best focus {stack.best_focus_dpt:+.3f} dpt)")
    return 0


def _eval_stack(args):
    stack = load_stack(args.stack)
    norm = normalize_curve(stack.sharpness)
    print("index  focus_dpt     tenengrad  normalized")
    for k, (f, v, n) in enumerate(zip(stack.focus_positions_dpt, stack.sharpness, norm)):
        flag = "  <- peak" if k == stack.best_index else ""
        print(f"{k:>5}  {f:+9.4f}  {v:12.6g}  {n:10.4f}{flag}")
    peaks = count_local_maxima(stack.sharpness)
    print(f"peak index {stack.best_index} at {stack.best_focus_dpt:+.4f} dpt; "
          f"{'unimodal' if peaks == 1 else f'{peaks} local maxima'}")
    return 0


def _report(cfg, result):
    print(bench.format_summary(cfg, result), end="")
    print(f"outputs in {cfg.output}")
    return 1 if result.failures else 0


def _run(args):
    cfg = bench.load_config(args.config)
    if args.controller:
        cfg.controllers = (args.controller,)
    else:
        cfg.controllers = cfg.controllers[:1]
    if args.scene:
        scenes = [s for s in cfg.scenes if s.name == args.scene]
        if not scenes:
            raise bench.ConfigError(f"{args.config}: no [scene.{args.scene}] section")
        cfg.scenes = scenes
    else:
        cfg.scenes = cfg.scenes[:1]
    if args.output:
        cfg.output = args.output
    bench.ExperimentConfig.__post_init__(cfg)
    return _report(cfg, bench.run_suite(cfg))


def _bench(args):
    cfg = bench.load_config(args.config)
    if args.output:
        cfg.output = args.output
    return _report(cfg, bench.run_suite(cfg))


def _train(args):
    from .model.checkpoint import save_params
    from .model.train import TrainConfig, train, write_log_csv
    overrides = {}
    lens = LensConfig()
    if args.config:
        cfg = bench.load_config(args.config)
        overrides.update(cfg.train)
        lens = cfg.lens
    for key in ("epochs", "seed", "optimizer", "learning_rate", "max_seconds"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    tc = TrainConfig(**overrides)

    def progress(row):
        print(f"epoch {row[0]:>3}  loss {row[1]:.4f}  focus {row[2]:.4f}  heatmap {row[3]:.4f}", flush=True)

    result = train(train_config=tc, lens=lens, progress=progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(out, result.params)
    if args.log:
        write_log_csv(args.log, result.log)
    if result.message:
        print(result.message)
    print(f"wrote {out}")
    return 1 if result.aborted else 0


def build_parser():
    p = argparse.ArgumentParser(prog="focuslab", description="Learned and search-based autofocus on simulated focal stacks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("synth", help="generate synthetic focal stacks")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--positions", type=int, default=80, help="focus positions per stack (default 80)")
    s.add_argument("--count", type=int, default=1, help="number of stacks; >1 writes stack_NNN subdirectories")
    s.add_argument("--size", type=int, default=64, help="frame width and height in pixels")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_synth)

    s = sub.add_parser("eval-stack", help="print the masked sharpness curve of a stack")
    s.add_argument("stack", help="stack directory containing manifest.tsv")
    s.set_defaults(func=_eval_stack)

    s = sub.add_parser("run", help="one controller on one scene from a config file")
    s.add_argument("config")
    s.add_argument("--controller", help="controller name (default: first listed in the config)")
    s.add_argument("--scene", help="scene name (default: first [scene.*] section)")
    s.add_argument("--output", help="override the output directory")
    s.set_defaults(func=_run)

    s = sub.add_parser("bench", help="every controller on every scene from a config file")
    s.add_argument("config")
    s.add_argument("--output", help="override the output directory")
    s.set_defaults(func=_bench)

    s = sub.add_parser("train", help="train the learned controller and write a checkpoint")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--config", help="take [train] and [lens] settings from this config")
    s.add_argument("--log", help="write the per-epoch loss CSV here")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--optimizer", choices=("sgd", "adam"))
    s.add_argument("--learning-rate", dest="learning_rate", type=float)
    s.add_argument("--max-seconds", dest="max_seconds", type=float)
    s.set_defaults(func=_train)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (bench.ConfigError, StackFormatError, FileNotFoundError, ValueError) as exc:
        print(f"focuslab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
