"""Command line interface.

Subcommands
-----------
simulate    write a synthetic population frame and its true area effects
estimate    per-area point estimates for every configured estimator
ci          per-area bootstrap intervals for every configured estimator
benchmark   Monte Carlo MSE ranking of the configured estimator grid
coverage    Monte Carlo interval coverage of the configured estimator grid

All subcommands take --config (JSON, see the io module docstring) plus
--seed, --out and --workers overrides; ci also accepts --scheme, --B, --C
and --alpha, and benchmark / coverage accept --replications.  Every output
CSV begins with a comment line naming the tool version, the seed and the
configuration hash, and the configuration bytes are echoed verbatim to
``config.used.json`` in the output directory.  Timing files are written
separately because wall times are the one output that legitimately varies
between reruns; everything else is byte-identical for a fixed (input,
configuration, seed), whatever the worker count.  Failures print a single
machine-readable JSON record to stderr, leave ``error.json`` in the output
directory when possible, and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import __version__
from .bootstrap import bootstrap_ci, double_bootstrap_ci
from .errors import AreaEffectError, ConfigError
from .estimators import EstimationContext, EstimationSession, estimate
from .harness import (BootstrapSettings, ReplicationPlan, rank_table,
                      run_coverage, run_replications, table_csv_rows,
                      timing_csv_rows)
from .io import (RunConfig, estimate_csv_rows, frame_csv_rows, ingest,
                 interval_csv_rows, load_config, write_csv, write_json)
from .simulate import SimConfig, simulate


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="areaeffect",
        description="Small-area causal effect estimation toolkit")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    helps = {
        "simulate": "write a synthetic population frame and its true effects",
        "estimate": "per-area point estimates on a frame CSV",
        "ci": "per-area bootstrap intervals on a frame CSV",
        "benchmark": "Monte Carlo MSE ranking of the estimator grid",
        "coverage": "Monte Carlo interval coverage of the estimator grid",
    }
    parsers = {}
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", required=True,
                        help="path of the JSON run configuration")
        sp.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides the config)")
        sp.add_argument("--out", default=None,
                        help="output directory (overrides the config)")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes (overrides the config)")
        parsers[name] = sp
    parsers["ci"].add_argument("--scheme", choices=("single", "double"),
                               default=None)
    parsers["ci"].add_argument("--B", type=int, default=None)
    parsers["ci"].add_argument("--C", type=int, default=None)
    parsers["ci"].add_argument("--alpha", type=float, default=None)
    for name in ("benchmark", "coverage"):
        parsers[name].add_argument("--replications", type=int, default=None)
    return parser


def _apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    fields: dict = {}
    if args.seed is not None:
        fields["seed"] = args.seed
    if args.out is not None:
        fields["outdir"] = args.out
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("workers must be >= 1")
        fields["workers"] = args.workers
    if getattr(args, "replications", None) is not None:
        if args.replications < 1:
            raise ConfigError("replications must be >= 1")
        fields["replications"] = args.replications
    boot = {"B": getattr(args, "B", None), "C": getattr(args, "C", None),
            "alpha": getattr(args, "alpha", None)}
    if any(v is not None for v in boot.values()):
        base = cfg.bootstrap if cfg.bootstrap is not None else BootstrapSettings()
        fields["bootstrap"] = dataclasses.replace(
            base, **{k: v for k, v in boot.items() if v is not None})
    if getattr(args, "scheme", None) is not None:
        fields["scheme"] = args.scheme
    return dataclasses.replace(cfg, **fields) if fields else cfg


def _sim_config(cfg: RunConfig) -> SimConfig:
    base = cfg.sim if cfg.sim is not None else SimConfig()
    return dataclasses.replace(base, master_seed=cfg.seed)


def _need_specs(cfg: RunConfig) -> None:
    if not cfg.specs:
        raise ConfigError("this command needs at least one entry in specs")


def _load_frame(cfg: RunConfig):
    if cfg.input is None:
        raise ConfigError("this command needs an input frame (config key "
                          "'input')")
    return ingest(cfg.input, cfg.contextual)


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.outdir, name)


def cmd_simulate(cfg: RunConfig) -> None:
    pop = simulate(_sim_config(cfg))
    write_csv(_out(cfg, "frame.csv"), frame_csv_rows(pop.frame),
              cfg.header_comment)
    truth = [["area", "tau"]] + [
        [str(lab), repr(float(pop.tau[j]))]
        for j, lab in enumerate(pop.frame.area_labels)]
    write_csv(_out(cfg, "truth.csv"), truth, cfg.header_comment)
    write_json(_out(cfg, "sim_report.json"),
               {"areas": pop.frame.m, "units": pop.frame.n_units,
                "sampled": int(pop.frame.s.sum()),
                "diagnostics": pop.diagnostics})


def cmd_estimate(cfg: RunConfig) -> None:
    _need_specs(cfg)
    frame, report = _load_frame(cfg)
    session = EstimationSession(
        frame, EstimationContext(frame, mu_interactions=cfg.interactions))
    results = [(spec.label,
                estimate(frame, spec, seed=cfg.seed, session=session))
               for spec in cfg.specs]
    write_csv(_out(cfg, "estimates.csv"), estimate_csv_rows(results),
              cfg.header_comment)
    write_json(_out(cfg, "ingest_report.json"), report)


def cmd_ci(cfg: RunConfig) -> None:
    _need_specs(cfg)
    frame, report = _load_frame(cfg)
    session = EstimationSession(
        frame, EstimationContext(frame, mu_interactions=cfg.interactions))
    boot = cfg.bootstrap if cfg.bootstrap is not None else BootstrapSettings()
    results = []
    for spec in cfg.specs:
        if cfg.scheme == "double":
            res = double_bootstrap_ci(frame, spec, B=boot.B, C=boot.C,
                                      alpha=boot.alpha, seed=cfg.seed,
                                      workers=cfg.workers, level1=boot.level1,
                                      session=session)
        else:
            res = bootstrap_ci(frame, spec, B=boot.B, alpha=boot.alpha,
                               seed=cfg.seed, workers=cfg.workers,
                               level1=boot.level1, session=session)
        results.append((spec.label, res))
    write_csv(_out(cfg, "intervals.csv"), interval_csv_rows(results),
              cfg.header_comment)
    write_json(_out(cfg, "ingest_report.json"), report)


def _write_tables(cfg: RunConfig, table) -> None:
    write_csv(_out(cfg, "results.csv"), table_csv_rows(table),
              cfg.header_comment)
    with open(_out(cfg, "results.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# {cfg.header_comment}\n")
        fh.write(rank_table(table, include_time=False) + "\n")
    write_csv(_out(cfg, "timings.csv"), timing_csv_rows(table),
              cfg.header_comment + " (wall times; not reproducible)")


def cmd_benchmark(cfg: RunConfig) -> None:
    _need_specs(cfg)
    pop = simulate(_sim_config(cfg))
    plan = ReplicationPlan(cfg.specs, cfg.replications,
                           master_seed=cfg.seed, workers=cfg.workers)
    _write_tables(cfg, run_replications(plan, pop))


def cmd_coverage(cfg: RunConfig) -> None:
    _need_specs(cfg)
    pop = simulate(_sim_config(cfg))
    boot = cfg.bootstrap if cfg.bootstrap is not None else BootstrapSettings()
    plan = ReplicationPlan(cfg.specs, cfg.replications,
                           master_seed=cfg.seed, workers=cfg.workers,
                           bootstrap=boot)
    _write_tables(cfg, run_coverage(plan, pop))


_COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "ci": cmd_ci,
    "benchmark": cmd_benchmark,
    "coverage": cmd_coverage,
}


def _emit_error(exc: Exception, command: str, outdir: str | None) -> None:
    record = {
        "error": getattr(exc, "kind", "error"),
        "type": type(exc).__name__,
        "command": command,
        "message": str(exc),
    }
    sys.stderr.write(json.dumps(record) + "\n")
    if outdir is not None:
        try:
            write_json(os.path.join(outdir, "error.json"), record)
        except OSError:
            pass


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    outdir = None
    try:
        cfg = _apply_flags(load_config(args.config), args)
        os.makedirs(cfg.outdir, exist_ok=True)
        outdir = cfg.outdir
        with open(os.path.join(cfg.outdir, "config.used.json"), "wb") as fh:
            fh.write(cfg.raw)
        _COMMANDS[args.command](cfg)
        return 0
    except (AreaEffectError, OSError) as exc:
        _emit_error(exc, args.command, outdir)
        return 1


if __name__ == "__main__":
    sys.exit(main())
