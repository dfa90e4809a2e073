"""Command-line entry point.

Exit status: 0 on success, 1 on configuration or usage errors, 2 on
runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import config as cfgmod
from .alloop import run_experiment, run_suite
from .data import PhantomConfig, generate_phantom, save_dataset
from .report import aggregate, curves_csv, read_results, write_report

log = logging.getLogger("hybrid_al")

RESOLVED_NAME = "config.resolved.yaml"
TIMING_NAME = "suite_seconds.txt"


class UsageError(Exception):
    pass


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        for p in out.glob("*.csv"):
            p.unlink()
        (out / RESOLVED_NAME).unlink(missing_ok=True)
        (out / TIMING_NAME).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)


def _load_config(args):
    return cfgmod.load(args.config, args.set or ())


def cmd_gen_data(args) -> int:
    pc = PhantomConfig(n_volumes=args.volumes, noise=args.noise)
    out = Path(args.out)
    _prepare_out(out, args.force)
    vols = generate_phantom(args.seed, pc)
    save_dataset(vols, out, pc.n_classes)
    print(f"wrote {len(vols)} volumes and manifest.tsv to {out}")
    return 0


def cmd_run(args) -> int:
    resolved = _load_config(args)
    if args.strategy:
        resolved["experiment"]["strategies"] = [args.strategy]
    if args.seed is not None:
        resolved["experiment"]["seeds"] = [args.seed]
    resolved["experiment"]["strategies"] = resolved["experiment"]["strategies"][:1]
    resolved["experiment"]["seeds"] = resolved["experiment"]["seeds"][:1]
    resolved = cfgmod.resolve(resolved)
    cfgs, seeds, _ = cfgmod.build(resolved)
    out = Path(args.out)
    _prepare_out(out, args.force)
    (out / RESOLVED_NAME).write_text(cfgmod.dump(resolved))
    rec = run_experiment(cfgs[0], out)
    print(f"{rec.run_id}: {len(rec.rows)} iterations written to {out}")
    return 0


def cmd_suite(args) -> int:
    resolved = _load_config(args)
    cfgs, seeds, upper = cfgmod.build(resolved)
    out = Path(args.out)
    _prepare_out(out, args.force)
    (out / RESOLVED_NAME).write_text(cfgmod.dump(resolved))
    t0 = time.perf_counter()
    records = run_suite(cfgs, seeds, out, jobs=args.jobs, upper_bound=upper)
    (out / TIMING_NAME).write_text(f"{time.perf_counter() - t0:.1f}\n")
    failed = [r for r in records if r.error]
    rows, _ = read_results(out)
    (out / "summary.csv").write_text(curves_csv(aggregate(rows)))
    print(f"{len(records) - len(failed)} runs finished, {len(failed)} failed; summary at {out / 'summary.csv'}")
    for r in failed:
        print(f"FAILED {r.run_id}: {r.error}", file=sys.stderr)
    return 2 if failed else 0


def cmd_report(args) -> int:
    try:
        path, skipped = write_report(args.results, args.out)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    if skipped:
        print(f"warning: skipped {skipped} malformed rows", file=sys.stderr)
    print(f"wrote {path}")
    return 0


def cmd_oracle_check(args) -> int:
    from .oracles import run_checks

    results = run_checks(inject_fault=args.inject_fault)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-al", description="Bayesian active learning experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a phantom dataset and manifest")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--volumes", type=int, default=30)
    p.add_argument("--noise", type=float, default=PhantomConfig.noise)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (
        ("run", cmd_run, "run one strategy under one seed"),
        ("suite", cmd_suite, "run every strategy under every seed"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--force", action="store_true")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
        if name == "run":
            p.add_argument("--strategy")
            p.add_argument("--seed", type=int)
        else:
            p.add_argument("--jobs", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="aggregate results CSVs into curve tables")
    p.add_argument("results")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("oracle-check", help="run the built-in brute-force checks")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
