"""Command-line entry point: generate, train, eval, infer and gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route it through our own code instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="canet", description="Confidence-aware camouflaged object detection.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic camouflage dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--difficulty", type=float, default=0.8)

    t = sub.add_parser("train", help="train both networks")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--out", required=True, help="final checkpoint path")
    t.add_argument("--mode", choices=("ours", "m1", "m2", "m3"))
    t.add_argument("--lr-scale", type=float, help="multiplier on both learning rates")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="epoch log CSV (default: <out>.log.csv)")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)

    i = sub.add_parser("infer", help="predict one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--pred", required=True)
    i.add_argument("--conf", required=True)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--no-networks", action="store_true", help="skip the two whole-network cases")
    return parser


def _load_config(args):
    from .train import TrainConfig

    raw = {}
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ValueError(f"config {path} must hold a JSON object")
    for flag, key in (("mode", "mode"), ("lr_scale", "lr_scale"), ("epochs", "epochs"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            raw[key] = value
    return TrainConfig.from_dict(raw)


def cmd_generate(args, out) -> None:
    from .synth import generate_dataset

    m = generate_dataset(args.out, args.count, args.size, args.seed, args.difficulty)
    print(f"wrote {m.count} samples of {m.size}px to {args.out}", file=out)


def cmd_train(args, out) -> None:
    from .synth import load_manifest
    from .train import train

    config = _load_config(args)
    load_manifest(args.data)     # fail early, naming the path

    def progress(row):
        print(f"epoch {row.epoch}: loss_s={row.loss_s:.4f} loss_c={row.loss_c:.4f} "
              f"mean_yc={row.mean_yc:.4f} lambda={row.lam:g} ({row.seconds:.1f}s)", file=out, flush=True)

    train(config, args.data, args.out, log_path=args.log, resume=args.resume, progress=progress)
    print(f"checkpoint written to {args.out}", file=out)


def cmd_eval(args, out) -> None:
    from .train import evaluate, load_state

    report = evaluate(load_state(args.ckpt), args.data)
    report.write_csv(args.report)
    agg = report.aggregate
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.items()), file=out)


def cmd_infer(args, out) -> None:
    from .train import infer

    infer(args.ckpt, args.image, args.pred, args.conf)
    print(f"wrote {args.pred} and {args.conf}", file=out)


def cmd_gradcheck(args, out) -> bool:
    from .gradsuite import run_suite

    print(f"{'case':<20} {'shape':<16} {'max rel err':>12} {'coords':>7} {'crossed':>8}  status", file=out)

    def row(r):
        status = "ok" if r.passed(args.tol) else "FAIL"
        print(f"{r.name:<20} {r.shape:<16} {r.error:>12.3e} {r.checked:>7} {r.crossings:>8}  {status}",
              file=out, flush=True)

    results = run_suite(seed=args.seed, include_networks=not args.no_networks, progress=row)
    failed = [r for r in results if not r.passed(args.tol)]
    worst = max(r.error for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} cases below {args.tol:g}; worst {worst:.3e}", file=out)
    return not failed


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE
    except SystemExit as exc:        # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    handlers = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
                "gradcheck": cmd_gradcheck}
    try:
        ok = handlers[args.command](args, out)
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as exc:
        print(f"error: {args.command}: {exc}", file=err)
        return EXIT_RUNTIME
    if ok is False:
        print("error: gradcheck: some cases exceed the tolerance", file=err)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
