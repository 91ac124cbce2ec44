"""``ftfl-lab`` command line.

Verbs::

    run          train each seed of one config
    ablate       the residual/direct x norm/no-norm grid (or the contact suite)
    probe        pseudo-online model probing on a buffer dump
    aggregate    final-window IQM table over every metrics CSV in a directory
    dump-buffer  train SAC agents and keep the best agent's replay buffer

Exit codes: 0 ok, 1 config error, 2 non-finite abort, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import CELLS, ConfigError, ExperimentConfig, parse_config, render_config, with_algo, with_cell
from .dyna import run_pseudo_online, train_agent
from .evaluation import (AGGREGATE_COLUMNS, CONTACT_COLUMNS, METRIC_COLUMNS, aggregate, contact_gap_report,
                         final_performance, format_value, read_metrics_csv, write_aggregate_csv)
from .replay import DumpFormatError
from .sac import NonFiniteError

log = logging.getLogger("ftfl_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE, EXIT_IO = 0, 1, 2, 3


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(p) for p in text.replace(" ", "").split(",") if p]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("--seeds contains duplicates")
    return seeds


def n_workers(n_jobs: int) -> int:
    raw = os.environ.get("FTFL_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"FTFL_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError("FTFL_THREADS must be >= 1")
    return max(1, min(cap, n_jobs))


def _run_one(cfg: ExperimentConfig, out: Path):
    """Train one run, writing its CSV and config snapshot; returns (name, record)."""
    name = cfg.run_name()
    (out / f"{name}.ini").write_text(render_config(cfg))
    record, _, buffer = train_agent(cfg, out / f"{name}.csv")
    return name, record, buffer


def _run_one_light(cfg: ExperimentConfig, out: Path):
    name, record, _ = _run_one(cfg, out)
    return name, record


def run_all(cfgs: list[ExperimentConfig], out: Path, keep_buffers: bool = False) -> list:
    """Execute runs, in worker processes when ``FTFL_THREADS`` allows."""
    names = [c.run_name() for c in cfgs]
    if len(set(names)) != len(names):
        raise ConfigError("two runs would write the same CSV")
    fn = _run_one if keep_buffers else _run_one_light
    workers = n_workers(len(cfgs))
    if workers == 1:
        return [fn(c, out) for c in cfgs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cfgs, [out] * len(cfgs)))


def _load_configs(args, algo: str | None = None) -> list[ExperimentConfig]:
    overrides = list(args.set or [])
    if algo is not None:
        overrides.insert(0, f"dyna.algo={algo}")
    return [parse_config(args.config, overrides, seed=s) for s in parse_seeds(args.seeds)]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- verbs -------------------------------------------------------------------

def cmd_run(args) -> int:
    cfgs = _load_configs(args)
    out = _out_dir(args)
    for name, record in run_all(cfgs, out):
        log.info("%s: %d eval rows", name, len(record.rows))
    return EXIT_OK


def ablation_grid(base: list[ExperimentConfig]) -> list[ExperimentConfig]:
    return [with_cell(c, mode, norm) for c in base for (mode, norm) in CELLS]


def contact_grid(base: list[ExperimentConfig]) -> list[ExperimentConfig]:
    cfgs = []
    for c in base:
        for include in (True, False):
            params = {**c.env_params, "include_contact": include}
            for algo in ("ftfl", "sac"):
                cfgs.append(dataclasses.replace(with_algo(c, algo), env_params=params))
    return cfgs


def cmd_ablate(args) -> int:
    base = _load_configs(args)
    out = _out_dir(args)
    if args.suite == "contact":
        if any(c.env_name != "contact_hopper_lite" for c in base):
            raise ConfigError("the contact suite needs env.name=contact_hopper_lite")
        results = run_all(contact_grid(base), out)
        rows = aggregate([r for _, r in results], window=base[0].final_window)
        write_aggregate_csv(out / "contact_aggregate.csv", rows)
        report = contact_gap_report(rows)
        with open(out / "contact_summary.csv", "w", newline="") as fh:
            fh.write(",".join(CONTACT_COLUMNS) + "\n")
            for r in report:
                fh.write(",".join([r["variant"]] + [format_value(r[c]) for c in CONTACT_COLUMNS[1:]]) + "\n")
        for r in report:
            print(f"{r['variant']:>10}: ftfl {r['ftfl_iqm']:.4g}  sac {r['sac_iqm']:.4g}  gap {r['gap']:.4g}")
        return EXIT_OK
    results = run_all(ablation_grid(base), out)
    rows = aggregate([r for _, r in results], window=base[0].final_window)
    write_aggregate_csv(out / "ablation_summary.csv", rows)
    for r in rows:
        print(f"{r.algo:>9} {r.env}: iqm {r.iqm:.4g} [{r.ci_low:.4g}, {r.ci_high:.4g}]")
    return EXIT_OK


def cmd_probe(args) -> int:
    if not args.buffer:
        raise ConfigError("probe needs --buffer <dump file>")
    buffer = Path(args.buffer)
    if not buffer.is_file():
        raise FileNotFoundError(f"buffer dump not found: {buffer}")
    out = _out_dir(args)
    for cfg in _load_configs(args):
        if not cfg.model_based:
            raise ConfigError("probe needs a model-based algo (mbpo, ftfl or ablation)")
        name = f"probe_{cfg.label}_{buffer.stem}_s{cfg.seed}"
        (out / f"{name}.ini").write_text(render_config(cfg))
        rows = run_pseudo_online(cfg, buffer, csv_path=out / f"{name}.csv")
        last = rows[-1] if rows else None
        if last:
            print(f"{name}: {len(rows)} rounds, final reward rmse {last['reward_rmse']:.4g}")
    return EXIT_OK


def collect_records(directory: Path):
    records = []
    for path in sorted(directory.glob("*.csv")):
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if tuple(header or ()) != METRIC_COLUMNS:
            continue
        records.append(read_metrics_csv(path))
    return records


def cmd_aggregate(args) -> int:
    src = Path(args.runs or args.out)
    if not src.is_dir():
        raise FileNotFoundError(f"no such run directory: {src}")
    window = parse_config(args.config, args.set or []).final_window
    records = collect_records(src)
    if not records:
        raise ConfigError(f"no metrics CSVs found in {src}")
    rows = aggregate(records, window=window)
    out = _out_dir(args)
    write_aggregate_csv(out / "aggregate.csv", rows)
    print(",".join(AGGREGATE_COLUMNS))
    for r in rows:
        print(",".join([r.algo, r.env] + [format_value(getattr(r, c)) for c in AGGREGATE_COLUMNS[2:]]))
    return EXIT_OK


def cmd_dump_buffer(args) -> int:
    cfgs = _load_configs(args, algo="sac")
    if any(c.algo != "sac" for c in cfgs):
        raise ConfigError("dump-buffer trains SAC agents; drop the dyna.algo override")
    out = _out_dir(args)
    results = run_all(cfgs, out, keep_buffers=True)
    scores = [final_performance(rec, min(cfgs[0].final_window, len(rec.rows))) for _, rec, _ in results]
    best = int(np.argmax(scores))
    name, _, buffer = results[best]
    path = Path(args.buffer) if args.buffer else out / f"buffer_{cfgs[0].env_label}.bin"
    buffer.dump(path)
    print(f"kept {name} (final IQM {scores[best]:.4g}) -> {path} ({len(buffer)} rows)")
    return EXIT_OK


VERBS = {"run": cmd_run, "ablate": cmd_ablate, "probe": cmd_probe, "aggregate": cmd_aggregate,
         "dump-buffer": cmd_dump_buffer}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftfl-lab", description="Dyna-style model-based RL laboratory")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", help="INI config file (defaults apply when omitted)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override; repeatable")
    p.add_argument("--buffer", help="dump file: input for probe, output path for dump-buffer")
    p.add_argument("--runs", help="aggregate: directory of metrics CSVs (default --out)")
    p.add_argument("--suite", choices=("targets", "contact"), default="targets",
                   help="ablate: the target grid or the contact-channel comparison")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return VERBS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (OSError, DumpFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
