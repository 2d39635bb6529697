"""Command line entry point: gen-data, run, eval, grad-check, compare.

Exit codes: 0 success, 1 invalid config or input, 2 runtime failure,
3 gradient check above tolerance.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .gradcheck import GradCheckSizes, grad_check
from .skb import FormatError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("semfed")


def _load_config(path, seed=None, rounds=None, out=None) -> dict:
    raw = {}
    base = None
    if path:
        p = Path(path)
        raw = json.loads(p.read_text(encoding="utf-8"))
        base = p.parent
    if seed is not None:
        raw["seed"] = seed
    if rounds is not None:
        raw.setdefault("federation", {})["rounds"] = rounds
    if out is not None:
        raw["output_dir"] = str(out)
    return experiment.resolve_config(raw, base)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, seed=args.seed)
    paths = experiment.write_dataset(cfg, args.out)
    for key, p in paths.items():
        print(f"{key}: {p}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args.config, seed=args.seed, rounds=args.rounds, out=args.out)
    try:
        result = experiment.run_configured(cfg)
    except Exception:
        log.exception("run failed")
        return EXIT_RUNTIME
    final = result["summary"]["final"]
    print(f"final RSUM {final['rsum']:.2f} after {final['round']} rounds -> {cfg['output_dir']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, seed=args.seed)
    total, parts = experiment.evaluate_checkpoint(cfg, args.checkpoint)
    print(json.dumps({"rsum": total, **parts}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    sizes = GradCheckSizes(d_h=args.d_h, d_s=args.d_s, n=args.samples, layers=args.layers)
    report = grad_check(args.seed if args.seed is not None else 0, sizes)
    print("\n".join(report.lines()))
    return EXIT_OK if report.ok else EXIT_GRADCHECK


def cmd_compare(args) -> int:
    n = experiment.compare_runs(args.runs, args.out)
    print(f"wrote {n} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semfed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset to feature files")
    p.add_argument("--config", help="JSON config (defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run one federated experiment")
    p.add_argument("--config", help="JSON config (defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="RSUM of a checkpoint on the configured eval split")
    p.add_argument("--config", help="JSON config describing the dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    p.add_argument("--seed", type=int)
    p.add_argument("--d-h", type=int, default=8)
    p.add_argument("--d-s", type=int, default=4)
    p.add_argument("--samples", type=int, default=6)
    p.add_argument("--layers", type=int, default=1)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("compare", help="merge runs' metrics into one long CSV")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="merged CSV path")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (experiment.ConfigError, FormatError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
