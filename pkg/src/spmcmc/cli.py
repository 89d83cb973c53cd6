"""Command-line entry point: ``spmcmc run | compare | reference | selftest``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import harness
from .harness import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, ConfigError, ExperimentConfig

log = logging.getLogger("spmcmc")


def parse_seeds(text: str) -> list[int]:
    """``"1,2,5-7"`` -> ``[1, 2, 5, 6, 7]``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed list {text!r}") from None
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def _add_config_flags(p: argparse.ArgumentParser):
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(),
                       help=f"(default: {f.default!r})")


def build_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        values.update(harness.read_config_file(args.config))
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(args, f.name)
        if v is not None:
            values[f.name] = v
    return ExperimentConfig.from_dict(values).validate()


def _run_one(cfg: ExperimentConfig) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return harness.run_experiment(cfg)


def cmd_run(args) -> int:
    cfg = build_config(args)
    if not args.sweep:
        status = harness.run_experiment(cfg)
        if status == EXIT_OK:
            print(cfg.resolved_output())
        return status
    base = cfg.resolved_output()
    configs = [dataclasses.replace(cfg, seed=s, output=str(base / f"seed_{s}")) for s in parse_seeds(args.sweep)]
    workers = args.workers or None
    with ProcessPoolExecutor(max_workers=workers) as pool:
        statuses = list(pool.map(_run_one, configs))
    for c, s in zip(configs, statuses):
        print(f"{c.output}\t{'ok' if s == EXIT_OK else f'exit {s}'}")
    return max(statuses)


def cmd_compare(args) -> int:
    header, rows = harness.compare(args.runs, args.metric, out=args.out)
    if args.out is None:
        print(",".join(header))
        for r in rows:
            print(",".join([str(r[0])] + ["" if v is None else repr(float(v)) for v in r[1:]]))
    return EXIT_OK


def cmd_reference(args) -> int:
    cfg = build_config(args)
    target, ident = harness.build_target(cfg)
    setup = None if target.has_exact_sampler else harness.prepare(cfg, target)
    ref = harness.build_reference(target, cfg.reference_size, cfg.reference_seed, setup, thin=args.thin)
    ref.meta["target"] = ident
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ref.save(out)
    print(out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return EXIT_OK if run_all() else EXIT_RUNTIME


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spmcmc", description="Stein Point MCMC experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment (or a seed sweep)")
    run.add_argument("--config", help="INI-style file of configuration keys; flags override it")
    run.add_argument("--sweep", help="seed list such as 1-10 or 1,3,5; one subdirectory per seed")
    run.add_argument("--workers", type=int, default=0, help="processes for --sweep (default: CPU count)")
    _add_config_flags(run)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="align a metric against n_eval across runs")
    cmp_.add_argument("runs", nargs="+", help="run directories")
    cmp_.add_argument("--metric", choices=("ksd", "energy"), default="ksd")
    cmp_.add_argument("--out", help="CSV path (default: stdout)")
    cmp_.set_defaults(func=cmd_compare)

    ref = sub.add_parser("reference", help="build and save a reference sample")
    ref.add_argument("--config")
    ref.add_argument("--out", required=True)
    ref.add_argument("--thin", type=int, default=10, help="thinning for chain-based references")
    _add_config_flags(ref)
    ref.set_defaults(func=cmd_reference)

    st = sub.add_parser("selftest", help="run the built-in oracle checks")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.exception("failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
