"""Command line entry point: ``atomcbf <command> [--config F] [--seed N] [--out DIR] ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime or solver error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline, report
from .config import Config, ConfigError, load_config
from .harness import (
    EUQ_OF,
    TrialError,
    TrialRecord,
    ablate_gamma,
    classify_outcome,
    make_trial_spec,
    parse_cell,
    run_experiment,
    summarize_cell,
)
from .nn import DivergenceError
from .safety_filter import SolverError

COMMANDS = ("gen-data", "train", "fit-euq", "calibrate", "run", "ablate-gamma", "report")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="atomcbf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML config file (defaults when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the seed this command uses")
        p.add_argument("--out", default="artifacts", help="artifact directory")
        p.add_argument("--trials", type=int, default=None, help="trials per cell (run, ablate-gamma)")
        p.add_argument("--parallel", type=int, default=1, help="worker processes for trials")
    return ap


def _with_seed(cfg: Config, command: str, seed: int | None) -> Config:
    if seed is None:
        return cfg
    if command == "gen-data":
        return replace(cfg, perception=replace(cfg.perception, data_seed=seed))
    return cfg.with_overrides(seed=seed)


def _summary(cfg: Config, command: str, result: dict, out: Path) -> dict:
    doc = {"command": command, "config_sha256": cfg.digest(), "result": result}
    report.write_json(doc, out / f"{command}.summary.json")
    return doc


def cmd_run(cfg: Config, out: Path, parallel: int) -> tuple[dict, int]:
    models = pipeline.load_models(out)
    summary, records = run_experiment(cfg, models, parallel)
    for cell, recs in records.items():
        report.write_cell_logs(cell, recs, out)
    report.write_table1(summary["cells"], out / "table1.csv")
    render(cfg, out, records, models)
    return summary, 3 if summary["aborted"] else 0


def render(cfg: Config, out: Path, records: dict, models) -> list[str]:
    """Figures: one three-panel plot per scenario episode, one score histogram per ATOM cell."""
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    written = []
    by_scenario: dict = {}
    for cell, recs in records.items():
        scen, kind = parse_cell(cell)
        by_scenario.setdefault(scen.name, {})[kind] = recs
        euq = EUQ_OF.get(kind)
        if euq and scen.tag == "OoD":
            unc = np.concatenate([r.log["unc"][r.engaged()] for r in recs])
            name = f"scores_{cell.replace(':', '__')}.svg"
            report.plot_scores(models.cal_scores[euq], unc, figs / name, f"{euq}: ID calibration vs {scen.name}")
            written.append(name)
    for scen, kinds in sorted(by_scenario.items()):
        n = min(cfg.experiment.plots, *(len(v) for v in kinds.values()))
        for i in range(n):
            name = f"episode_{scen}_{i:04d}.svg"
            report.plot_trials({k: v[i] for k, v in kinds.items()}, models.artifacts, figs / name, f"{scen} trial {i}")
            written.append(name)
    return written


def cmd_report(cfg: Config, out: Path) -> dict:
    """Rebuild tables and figures from the trial logs on disk."""
    models = pipeline.load_models(out)
    records, cells = {}, []
    for cell in cfg.experiment.cells:
        d = out / "trials" / cell.replace(":", "__")
        if not d.is_dir():
            raise FileNotFoundError(f"no trial logs for {cell} in {d}; run the 'run' command first")
        recs = []
        for i in range(cfg.experiment.trials):
            spec = make_trial_spec(cfg, cell, i)
            rec = TrialRecord(spec, report.read_trial_csv(d / f"trial_{i:04d}.csv"))
            rec.outcome = classify_outcome(rec, spec)
            recs.append(rec)
        records[cell] = recs
        cells.append(summarize_cell(cell, recs, models))
    report.write_table1(cells, out / "table1.csv")
    figures = render(cfg, out, records, models)
    return {"cells": cells, "figures": figures}


def cmd_ablate(cfg: Config, out: Path, parallel: int) -> tuple[dict, int]:
    models = pipeline.load_models(out)
    errors, scores = pipeline.calibration_inputs(cfg, out)
    rows = ablate_gamma(cfg, models, errors, scores, cfg.calibration.ablation, parallel)
    report.write_table2(rows, out / "table2.csv")
    failed = [r for r in rows if r["status"] != "ok"]
    return {"rows": rows}, 0 if not failed else 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        cfg = _with_seed(cfg, args.command, args.seed)
        if args.trials is not None:
            cfg = cfg.with_overrides(trials=args.trials)
        if args.parallel < 1:
            raise ConfigError("--parallel must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    code = 0
    try:
        if args.command == "gen-data":
            result = pipeline.gen_data(cfg, out)
        elif args.command == "train":
            result = pipeline.train_stage(cfg, out, train_seed=args.seed or 0)
        elif args.command == "fit-euq":
            result = pipeline.fit_euq_stage(cfg, out)
        elif args.command == "calibrate":
            result = pipeline.calibrate_stage(cfg, out)
        elif args.command == "run":
            result, code = cmd_run(cfg, out, args.parallel)
        elif args.command == "ablate-gamma":
            result, code = cmd_ablate(cfg, out, args.parallel)
        else:
            result = cmd_report(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrialError, SolverError, DivergenceError, FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    _summary(cfg, args.command, result, out)
    if code:
        print(f"{args.command}: finished with failures, see {args.command}.summary.json", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
