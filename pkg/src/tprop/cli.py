"""Command-line entry point: ``tprop {train,jmc,gmp,thm1}``.

Exit codes: 0 success, 1 runtime failure (including a failed check), 2 usage,
configuration or missing-data error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import tomli_w

from . import experiments
from .checkpoint import save_checkpoint
from .config import load_config, to_toml
from .errors import ConfigError, DataError, TpropError
from .metrics import MetricSink
from .trainer import TrainConfig, Trainer, evaluate, load_data

SMALL_MODEL = ["model.channels=[8, 16]", "model.fc=64", "model.layers=[]"]


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="TOML config file (defaults apply when omitted)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a config field, e.g. run.epochs=1 (repeatable)")
        p.add_argument("--small", action="store_true", help="use the small LeNet (channels 8,16; fc 64)")
        p.add_argument("--threads", type=int, help="worker threads for per-layer feedback training")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--out", default="runs", help="parent directory of run outputs (default: runs)")
    p.add_argument("--run-id", help="output sub-directory name (default derived from command, config and seed)")
    p.add_argument("--quiet", action="store_true", help="do not echo metrics")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tprop", description="Difference target propagation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("train", help="train a classifier and report test accuracy"))
    _common(sub.add_parser("jmc", help="train feedback weights on one batch and track Jacobian angles"))
    _common(sub.add_parser("gmp", help="compare target-propagation updates with backprop gradients"))
    thm = sub.add_parser("thm1", help="Monte-Carlo check of the small-noise limit of the local loss")
    _common(thm, config=False)
    thm.add_argument("--pairs", type=int, default=5, help="number of random linear pairs")
    thm.add_argument("--max-dim", type=int, default=8, help="largest layer width")
    thm.add_argument("--sigmas", default="1e-1,1e-2,1e-3", help="comma-separated noise scales")
    thm.add_argument("--samples", type=int, default=20000, help="Monte-Carlo samples per sigma")
    return parser


def _overrides(args) -> list[str]:
    out = list(SMALL_MODEL) if args.small else []
    out += args.override
    if args.seed is not None:
        out.append(f"run.seed={args.seed}")
    if args.threads is not None:
        out.append(f"run.threads={args.threads}")
    return out


def _run_dir(args, seed: int) -> Path:
    stem = Path(args.config).stem if getattr(args, "config", None) else "default"
    run_id = args.run_id or f"{args.command}-{stem}-seed{seed}"
    path = Path(args.out) / run_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(args) -> int:
    cfg = load_config(TrainConfig, args.config, _overrides(args))
    train, test = load_data(cfg)
    out = _run_dir(args, cfg.run.seed)
    (out / "config.resolved.toml").write_text(to_toml(cfg))
    sink = MetricSink(out.name, out, echo=not args.quiet)
    try:
        trainer = Trainer(cfg, train.sample_shape, train.classes, sink)
        history = trainer.fit(train)
        loss, top1, top5 = evaluate(trainer.net, test, cfg.run.eval_batch_size)
        epoch = len(history) - 1
        sink.emit("eval", epoch, trainer.batch_counter, None, "final_loss", loss)
        sink.emit("eval", epoch, trainer.batch_counter, None, "final_top1", top1)
        sink.emit("eval", epoch, trainer.batch_counter, None, "final_top5", top5)
        save_checkpoint(trainer.net, out / "checkpoint.tprp")
    finally:
        sink.close()
    print(f"final test accuracy: top-1 {top1:.2f}%  top-5 {top5:.2f}%  loss {loss:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_jmc(args) -> int:
    cfg = load_config(experiments.JmcConfig, args.config, _overrides(args))
    out = _run_dir(args, cfg.run.seed)
    (out / "config.resolved.toml").write_text(to_toml(cfg))
    sink = MetricSink(out.name, out, echo=False)
    try:
        reports = experiments.run_jmc(cfg, sink)
    finally:
        sink.close()
    for r in reports:
        print(f"layer {r.layer}: angle {r.angle_degrees:.2f} deg, relative distance {r.relative_distance:.4f} "
              f"after {r.step} iterations")
    return 0


def cmd_gmp(args) -> int:
    cfg = load_config(experiments.GmpConfig, args.config, _overrides(args))
    out = _run_dir(args, cfg.run.seed)
    (out / "config.resolved.toml").write_text(to_toml(cfg))
    sink = MetricSink(out.name, out, echo=False)
    try:
        results = experiments.run_gmp(cfg, sink)
    finally:
        sink.close()
    print(experiments.format_gmp(results))
    return 0


def cmd_thm1(args) -> int:
    try:
        sigmas = [float(v) for v in args.sigmas.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--sigmas: cannot parse {args.sigmas!r}") from None
    seed = 0 if args.seed is None else args.seed
    tables = experiments.run_noise_limit(args.pairs, args.max_dim, sigmas, args.samples, seed)
    out = _run_dir(args, seed)
    settings = {"pairs": args.pairs, "max_dim": args.max_dim, "sigmas": sigmas, "samples": args.samples,
                "seed": seed}
    (out / "config.resolved.toml").write_text(tomli_w.dumps(settings))
    sink = MetricSink(out.name, out, echo=False)
    try:
        for i, (dims, table) in enumerate(tables):
            print(f"pair {i}: forward {dims[0]}x{dims[1]}")
            print(table.format())
            for j, row in enumerate(table.rows):
                sink.emit("thm1", i, j, None, "estimate", row.estimate)
                sink.emit("thm1", i, j, None, "std_error", row.std_error)
                sink.emit("thm1", i, j, None, "closed_form", row.closed_form)
    finally:
        sink.close()
    verdict = experiments.noise_limit_verdict(tables)
    if verdict is None:
        print("warning: standard error undefined, convergence check skipped", file=sys.stderr)
        return 0
    print("convergence check " + ("passed" if verdict else "FAILED"))
    return 0 if verdict else 1


COMMANDS = {"train": cmd_train, "jmc": cmd_jmc, "gmp": cmd_gmp, "thm1": cmd_thm1}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TpropError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
