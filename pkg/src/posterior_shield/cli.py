"""Command-line entry point: ``posterior-shield {run,bench,plot-data,calibrate,selftest}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 selftest failure.
"""

import argparse
import logging
import sys

from .config import parse_config, parse_value
from .exceptions import ConfigError, PosteriorShieldError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3

logger = logging.getLogger("posterior_shield")


def _key_value(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), parse_value(value.strip())


def _config_args(p):
    p.add_argument("config", help="TOML experiment config")
    p.add_argument("--seed", type=int, help="global seed (overrides the file)")
    p.add_argument("--output", "-o", help="output directory (overrides output_dir)")
    p.add_argument("--strict", action="store_true", help="reject unknown config keys")
    p.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                   metavar="KEY=VALUE", help="override a dotted config key, e.g. run.jobs=4")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="posterior-shield",
        description="Posterior-perturbation defenses against model extraction, with an "
                    "attack simulator and latency bench.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="sweep defenses and write points.csv, tables.md, report.json")
    _config_args(run)
    run.add_argument("--jobs", "-j", type=int, help="parallel sweep cells")
    run.add_argument("--allow-extended-beta", action="store_true",
                     help="accept beta values above 1.5")
    run.add_argument("--fail-fast", action="store_true", help="abort on the first failing cell")
    run.add_argument("--record-latency", action="store_true",
                     help="fill the mean_latency_ns column (makes points.csv nondeterministic)")

    bench = sub.add_parser("bench", help="per-query latency of each defense, written to latency.csv")
    _config_args(bench)
    bench.add_argument("--queries", type=int, help="timed queries per defense")
    bench.add_argument("--warmup", type=int, help="untimed warmup queries per defense")

    plot = sub.add_parser("plot-data", help="gnuplot-ready TSV files from a report.json")
    plot.add_argument("report", help="path to report.json")
    plot.add_argument("--output", "-o", default=None,
                      help="directory for the TSVs (default: next to the report)")

    cal = sub.add_parser("calibrate", help="largest strength meeting an l1 budget")
    _config_args(cal)
    cal.add_argument("--defense", required=True, help="defense name from the config")
    cal.add_argument("--l1-budget", type=float, default=None,
                     help="mean l1 budget (default: evaluation.l1_budget)")

    st = sub.add_parser("selftest", help="run the invariant suite")
    st.add_argument("--samples", type=int, default=1000)
    st.add_argument("--seed", type=int, default=0)
    return parser


def _load(args, extra=None):
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output is not None:
        overrides["output_dir"] = args.output
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return parse_config(args.config, overrides, strict=args.strict)


def cmd_run(args):
    from .runner import run_experiment

    extra = {"run.jobs": args.jobs}
    for flag, key in (("allow_extended_beta", "run.allow_extended_beta"),
                      ("fail_fast", "run.fail_fast"), ("record_latency", "run.record_latency")):
        if getattr(args, flag):
            extra[key] = True
    cfg = _load(args, extra)

    def progress(o):
        status = o.error or f"adv {100 * o.adversary_error:.2f}%  l1 {o.mean_l1:.3f}"
        logger.info("%s beta=%g seed=%d budget=%d: %s", o.defense, o.beta, o.seed, o.budget, status)

    report = run_experiment(cfg, progress=progress)
    print(f"wrote {cfg.output_dir}/points.csv ({len(report.points)} points, "
          f"{len(report.failures)} failed cells)")
    return EXIT_OK


def cmd_bench(args):
    from .runner import bench_latency

    cfg = _load(args, {"bench.queries": args.queries, "bench.warmup": args.warmup})
    rows = bench_latency(cfg)
    print("defense\tmean_ms\tmedian_ms\tp99_ms\toverhead")
    for r in rows:
        print(f"{r.defense}\t{r.mean_ms:.3f}\t{r.median_ms:.3f}\t{r.p99_ms:.3f}\t{r.overhead_ratio:.4f}")
    return EXIT_OK


def cmd_plot_data(args):
    import os

    from .runner import emit_plot_data, load_report

    report = load_report(args.report)
    out = args.output or os.path.dirname(os.path.abspath(args.report))
    for path in emit_plot_data(report, out):
        print(path)
    return EXIT_OK


def cmd_calibrate(args):
    from .runner import calibrate

    cfg = _load(args)
    budget = cfg.evaluation.l1_budget if args.l1_budget is None else args.l1_budget
    beta = calibrate(cfg, args.defense, budget)
    print(f"{args.defense}: beta={beta:g} (mean l1 <= {budget:g})")
    return EXIT_OK


def cmd_selftest(args):
    from .invariants import run_selftest

    results = run_selftest(n=args.samples, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "plot-data": cmd_plot_data,
            "calibrate": cmd_calibrate, "selftest": cmd_selftest}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PosteriorShieldError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
