"""Command line entry point: ``fedpow {run,skew,freq,bound}``.

Output directory precedence: ``--out``, then ``$FEDPOW_OUT_DIR``, then the
spec's ``output_dir``, then ``./fedpow_out``.

Exit codes: 0 success, 2 missing file or invalid spec, 3 divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .engine import DivergenceError
from .harness import (
    ExperimentSpec,
    SpecError,
    load_bound_params,
    load_spec,
    run_bound,
    run_experiment,
    run_freq,
    run_skew,
    with_overrides,
)

logger = logging.getLogger("fedpow")

OUT_ENV = "FEDPOW_OUT_DIR"
DEFAULT_OUT = "fedpow_out"
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def output_dir(args, spec=None):
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if spec is not None and getattr(spec, "output_dir", None):
        return Path(spec.output_dir)
    return Path(DEFAULT_OUT)


def _cmd_run(args):
    spec = with_overrides(load_spec(args.spec), base_seed=args.seed)
    out = output_dir(args, spec)
    summary = run_experiment(spec, out, parallelism=args.parallelism)
    for label, entry in summary["strategies"].items():
        print(f"{label}: final loss {entry['final_loss_mean']:.6g} "
              f"+/- {entry['final_loss_std']:.3g} over {len(entry['seeds'])} seed(s)")
    print(f"wrote {out}")


def _cmd_skew(args):
    spec = load_spec(args.spec)
    out = output_dir(args, spec)
    entries = run_skew(spec, out, seed=args.seed)
    for label, e in entries.items():
        print(f"{label}: rho_bar={e['rho_bar']:.4f} "
              f"rho_tilde/rho_bar={e['rho_tilde_over_rho_bar']:.4f} gamma={e['gamma']:.4g}")
    print(f"wrote {out / 'skew_report.json'}")


def _cmd_freq(args):
    path = run_freq(args.metrics, Path(args.out) / "freq_profile.csv" if args.out else None)
    print(f"wrote {path}")


def _cmd_bound(args):
    source = load_bound_params(args.spec)
    spec = source if isinstance(source, ExperimentSpec) else None
    out = output_dir(args, spec)
    run_bound(source, out, seed=args.seed)
    print(f"wrote {out / 'bound_table.csv'}")


def build_parser():
    parser = argparse.ArgumentParser(prog="fedpow", description="FedAvg client-selection experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, spec_help):
        p.add_argument("--spec", required=True, help=spec_help)
        p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV})")
        p.add_argument("--seed", type=int, help="override the base seed")

    p = sub.add_parser("run", help="train every (strategy, seed) and summarize")
    common(p, "experiment spec (YAML)")
    p.add_argument("--parallelism", default="1",
                   help="worker processes for independent runs; 'max' uses every CPU")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("skew", help="grid estimates of rho_bar and rho_tilde")
    common(p, "experiment spec (YAML)")
    p.set_defaults(func=_cmd_skew)

    p = sub.add_parser("freq", help="selection-frequency profile from metrics files")
    p.add_argument("metrics", help="run output directory or its metrics/ subdirectory")
    p.add_argument("--out", help="directory for freq_profile.csv")
    p.set_defaults(func=_cmd_freq)

    p = sub.add_parser("bound", help="decaying-rate and fixed-rate bound tables")
    common(p, "bound constants or an experiment spec to derive them from (YAML)")
    p.set_defaults(func=_cmd_bound)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
