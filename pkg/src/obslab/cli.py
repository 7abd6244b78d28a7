"""Command-line entry point.

    obslab run <config> [--out DIR] [--seed N] [--batch] [--no-plots]

Exit codes: 0 success, 2 config error, 3 invariant failure, 4 runtime or
numeric failure.  OBSLAB_OUT overrides the default output root.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .config import ConfigError, load_configs
from .integrate import IntegrationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_RUNTIME = 4


def _build_parser():
    ap = argparse.ArgumentParser(prog="obslab",
                                 description="sampled-data observer scenario runner")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a scenario config")
    run.add_argument("config", help="path to the scenario config (TOML)")
    run.add_argument("--out", default=None, help="output directory root")
    run.add_argument("--seed", type=int, default=None, help="override the schedule seed")
    run.add_argument("--batch", action="store_true",
                     help="run a [scenarios.*] batch concurrently")
    run.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    return ap


def _one(cfg, out_dir, make_plots):
    from .runner import run_scenario

    return run_scenario(cfg, out_dir, make_plots=make_plots)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfgs = load_configs(args.config, seed_override=args.seed)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_root = args.out or os.environ.get("OBSLAB_OUT") or "obslab_out"
    multi = len(cfgs) > 1
    jobs = []
    for cfg in cfgs:
        out_dir = cfg.out or (os.path.join(out_root, cfg.name) if multi else out_root)
        jobs.append((cfg, out_dir))

    results = []
    try:
        if args.batch and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 2)) as ex:
                futs = [ex.submit(_one, cfg, od, not args.no_plots) for cfg, od in jobs]
                results = [f.result() for f in futs]
        else:
            for cfg, od in jobs:
                results.append(_one(cfg, od, not args.no_plots))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FloatingPointError, ArithmeticError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    status = EXIT_OK
    for res in results:
        print(f"{res.name}: {'PASS' if res.passed else 'FAIL'} -> {res.out_dir}")
        for name, st, detail in res.checks:
            print(f"  [{st}] {name}: {detail}")
        if not res.passed:
            print(f"invariant failure: {next(n for n, s, _ in res.checks if s == 'FAIL')}",
                  file=sys.stderr)
            status = EXIT_INVARIANT
    return status


if __name__ == "__main__":
    sys.exit(main())
