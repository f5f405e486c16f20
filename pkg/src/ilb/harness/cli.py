"""Command-line entry point ``ilb``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 a bound suite
reported failing rows.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

from ..core import ILBError, read_dataset
from .bounds import SUITES, verify_bounds
from .config import ConfigError, load_configs
from .curve import CHECKPOINTS, emit_learning_curve
from .run import run_experiment

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_BOUND = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ilb", description="Imitation learning by dataset aggregation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an experiment (or a sweep) from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")

    v = sub.add_parser("verify", help="check a family of performance inequalities")
    v.add_argument("--suite", required=True, choices=SUITES)
    v.add_argument("--out")

    c = sub.add_parser("curve", help="learning-curve CSV from run directories")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--checkpoints", default=",".join(map(str, CHECKPOINTS)))

    d = sub.add_parser("dataset", help="dataset file utilities")
    dsub = d.add_subparsers(dest="action", required=True, parser_class=_Parser)
    di = dsub.add_parser("inspect", help="summarize a dataset file")
    di.add_argument("file")
    return p


def cmd_run(args) -> int:
    configs = load_configs(args.config, seed=args.seed, out=args.out)
    for cfg in configs:
        rec = run_experiment(cfg)
        print(rec.summary)
    return EXIT_OK


def cmd_verify(args) -> int:
    rep = verify_bounds(args.suite)
    if args.out:
        rep.write_csv(args.out)
    for r in rep.rows:
        flag = "PASS" if r.passed else "FAIL"
        print(f"{flag} {r.theorem_id} {r.instance_id} lhs={r.lhs:.6g} rhs={r.rhs:.6g} "
              f"slack={r.slack:.3g}")
    print(f"{args.suite}: {len(rep.rows) - len(rep.failures)}/{len(rep.rows)} rows pass")
    return EXIT_OK if rep.all_pass else EXIT_BOUND


def cmd_curve(args) -> int:
    try:
        cps = tuple(int(c) for c in args.checkpoints.split(","))
    except ValueError:
        raise ConfigError("checkpoints", "expected comma-separated integers")
    rows = emit_learning_curve(args.runs, args.out, cps)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    ds = read_dataset(args.file)
    print(f"examples: {len(ds)}")
    print(f"feature_dim: {ds.feature_dim}")
    print(f"action: {ds.action_spec.header()}")
    its = Counter(int(i) for i in ds.iterations)
    print("per_iteration: " + " ".join(f"{k}:{its[k]}" for k in sorted(its)))
    if ds.action_spec.discrete:
        labels = Counter(int(y) for y in ds.y)
        print("labels: " + " ".join(f"{k}:{labels[k]}" for k in sorted(labels)))
    else:
        y = ds.y.reshape(len(ds), -1)
        if len(ds):
            print(f"label_mean: {' '.join(f'{v:.6g}' for v in y.mean(axis=0))}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "verify": cmd_verify, "curve": cmd_curve,
                "dataset": cmd_dataset}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"ilb: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"ilb: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ILBError, ValueError, OSError) as exc:
        print(f"ilb: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
