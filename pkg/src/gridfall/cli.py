"""``gridfall`` command line: train, simulate, compare, retrain-experiment, export-models, validate-grid.

Exit codes: 0 success, 2 configuration or input error, 3 too many failed OPF
solves in the sweep, 4 power-flow divergence during a simulation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .cosim import (ConfigError, ControlCase, SimConfig, SimulationDiverged, compare_cases,
                    retraining_experiment, run_simulation, write_run)
from .grid import GridError, Scenario, apply_scenario, bundled_grid_path, load_grid
from .opf import RETRAIN_PARAMS, CostParams, read_training_csv, write_training_csv
from .powerflow import Dispatch, solve_pf
from .regression import BucketSet, ModelKind, load_model_sets, save_model_sets
from .training import train

log = logging.getLogger("gridfall")

EXIT_OK, EXIT_CONFIG, EXIT_SWEEP, EXIT_DIVERGED = 0, 2, 3, 4
LEARNERS = ("linear", "piecewise", "auto", "nnr")


class SweepFailed(RuntimeError):
    pass


def default_config_path() -> Path:
    return Path(__file__).parent / "data" / "default_config.json"


def _setup_logging() -> None:
    level = os.environ.get("GRIDFALL_LOG", "info").lower()
    levels = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(args) -> SimConfig:
    path = Path(args.config) if args.config else default_config_path()
    data = {}
    if path.exists() or args.config:
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        data[key] = value
    base_dir = path.parent if args.config else None
    cfg = SimConfig.from_dict(data, base_dir)
    if getattr(args, "grid", None):
        cfg = replace(cfg, grid=str(Path(args.grid).resolve()))
    if getattr(args, "profile", None):
        cfg = replace(cfg, profile=str(Path(args.profile).resolve()))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "learner", None):
        cfg = replace(cfg, learner=args.learner)
    if getattr(args, "deadband_eval", None) is not None:
        cfg = replace(cfg, evaluation_params=replace(cfg.evaluation_params, deadband_pu=args.deadband_eval))
    return cfg


def _models_dir(args, cfg: SimConfig) -> Path | None:
    raw = getattr(args, "models", None) or cfg.models_dir
    if not raw:
        return None
    p = Path(raw)
    return p / "models" if (p / "models").is_dir() else p


def _load_models(args, cfg) -> dict:
    d = _models_dir(args, cfg)
    if d is None:
        raise ConfigError("no model directory given; pass --models DIR (the output of `gridfall train`)")
    try:
        return load_model_sets(d)
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}; run `gridfall train --out DIR` first") from exc


def _load_buckets(args, cfg, grid) -> dict:
    d = _models_dir(args, cfg)
    tdir = d.parent / "training"
    if not tdir.is_dir():
        raise ConfigError(f"training data directory {tdir} not found next to the models")
    out = {}
    for i in grid.controllable:
        path = tdir / f"der_{i}.csv"
        if not path.exists():
            raise ConfigError(f"missing training data {path}")
        out[i] = BucketSet.from_rows(i, read_training_csv(path), grid.ders[i].kind, cfg.bucket_capacity)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# -- verbs ------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args)
    grid = cfg.load_grid()
    out = Path(args.out)
    started = time.perf_counter()
    res = train(grid, cfg.training_params, cfg.learner, cfg.k, cfg.sections, cfg.bucket_capacity, args.jobs)
    elapsed = time.perf_counter() - started
    sweep = res.sweep
    frac = len(sweep.failed) / max(len(sweep.results), 1)
    (out / "training").mkdir(parents=True, exist_ok=True)
    for i, rows in res.rows.items():
        write_training_csv(rows, out / "training" / f"der_{i}.csv")
    save_model_sets(res.model_sets, out / "models")
    report = sweep.report()
    report["opf_solves"] = len(sweep.results)
    report["learner"] = cfg.learner
    report["models_per_der"] = {str(i): len(ms.models) for i, ms in res.model_sets.items()}
    report["model_kinds"] = {str(i): sorted(k.value for k in ms.kinds()) for i, ms in res.model_sets.items()}
    report["borrowed_operating_points"] = {str(i): list(ms.borrowed) for i, ms in res.model_sets.items()}
    if args.timing:
        report["wall_clock_s"] = round(elapsed, 3)
    _write_json(out / "sweep_report.json", report)
    print(f"sweep: {report['opf_solves']} OPF solves, {report['converged']} converged "
          f"({elapsed:.1f} s, {args.jobs} jobs)")
    for i, ms in res.model_sets.items():
        print(f"DER {i}: {len(ms.models)} models -> {out / 'models' / f'der_{i}.json'}")
    if frac > args.max_failed:
        raise SweepFailed(f"{len(sweep.failed)} of {len(sweep.results)} OPF solves failed "
                          f"(threshold {args.max_failed:.1%})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    if args.case:
        cfg = cfg.with_case(args.case)
    models = _load_models(args, cfg) if cfg.case is ControlCase.OPF_REGRESSION else None
    if cfg.case.sees_failures and not cfg.failure_windows:
        log.warning("no failure windows configured: the fallback is never exercised")
    result = run_simulation(cfg, models)
    grid = cfg.load_grid()
    path = write_run(result, args.out, grid.n_bus)
    print(f"{cfg.case.value}: mean cost {result.mean_cost:.6f} over {result.report.steps} steps -> {path}")
    return EXIT_OK


def _parse_cases(text: str | None):
    if not text:
        return list(ControlCase)
    return [ControlCase.parse(x) for x in text.split(",") if x.strip()]


def cmd_compare(args) -> int:
    cfg = load_config(args)
    cases = _parse_cases(args.cases)
    models = _load_models(args, cfg) if ControlCase.OPF_REGRESSION in cases else None
    if not cfg.failure_windows and any(c.sees_failures for c in cases):
        log.warning("no failure windows configured: cases 3/4 never leave remote control")
    cmp = compare_cases(cfg, cases, models, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg.load_grid()
    for case, run in cmp.results.items():
        write_run(run, out, grid.n_bus, prefix=f"case{case.number}_")
    cmp.write_csv(out / "comparison.csv")
    text = cmp.to_text()
    (out / "comparison.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_retrain_experiment(args) -> int:
    cfg = load_config(args)
    grid = cfg.load_grid()
    models = _load_models(args, cfg)
    buckets = _load_buckets(args, cfg, grid)
    new_params = RETRAIN_PARAMS
    if args.new_params:
        try:
            new_params = CostParams.from_dict(json.loads(Path(args.new_params).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read new cost parameters: {exc}") from exc
    if not cfg.failure_windows:
        raise ConfigError("the retraining experiment needs at least one failure window")
    outcome = retraining_experiment(cfg, models, buckets, new_params, learner=args.learner)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for label, run in (("A", outcome.central), ("B", outcome.stale), ("C", outcome.retrained)):
        write_run(run, out, grid.n_bus, prefix=f"{label}_")
    save_model_sets(outcome.retrained_sets, out / "retrained_models")
    outcome.write_csv(out / "retraining.csv")
    text = outcome.to_text()
    (out / "retraining.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_export_models(args) -> int:
    cfg = load_config(args)
    sets = _load_models(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model_sets(sets, out)
    n = 0
    for der, ms in sets.items():
        path = out / f"der_{der}_tables.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["channel", "op_pct", "kind", "x", "y"])
            for (ch, op), m in sorted(ms.models.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
                if m.kind is ModelKind.NNR:
                    rows = m.payload
                elif m.kind is ModelKind.LINEAR:
                    rows = [["slope", m.payload["slope"]], ["intercept", m.payload["intercept"]]]
                else:
                    rows = ([["breakpoint", b] for b in m.payload["breakpoints"]]
                            + [[f"segment{j}_slope", s] for j, (s, _) in enumerate(m.payload["segments"])]
                            + [[f"segment{j}_intercept", c] for j, (_, c) in enumerate(m.payload["segments"])])
                for x, y in rows:
                    w.writerow([ch.value, op, m.kind.value, x if isinstance(x, str) else repr(float(x)),
                                repr(float(y))])
                n += 1
        print(f"DER {der}: version {ms.version}, {len(ms.models)} models -> {path}")
    return EXIT_OK


def cmd_validate_grid(args) -> int:
    path = Path(args.grid) if args.grid else None
    if path is None:
        cfg = load_config(args)
        path = Path(cfg.grid) if cfg.grid else bundled_grid_path()
    if not path.exists():
        raise ConfigError(f"grid file not found: {path}")
    grid = load_grid(path)
    print(f"{path}: {grid.n_bus} buses, {len(grid.branches)} branches, {len(grid.ders)} DERs "
          f"({len(grid.controllable)} controllable)")
    worst_lo, worst_hi = None, None
    for sc in (Scenario(100, 0, 0), Scenario(20, 100, 100), Scenario(0, 100, 100), Scenario(100, 100, 100)):
        sg = apply_scenario(grid, sc)
        pf = solve_pf(sg, Dispatch.full_feed_in(sg))
        if not pf.converged:
            print(f"power flow does not converge at {sc}")
            return EXIT_DIVERGED
        lo, hi = float(pf.v_pu.min()), float(pf.v_pu.max())
        print(f"  load {sc.load_pct:3d}% pv {sc.pv_pct:3d}% wind {sc.wind_pct:3d}%: "
              f"v in [{lo:.4f}, {hi:.4f}] pu, {pf.iterations} iterations")
        worst_lo = lo if worst_lo is None else min(worst_lo, lo)
        worst_hi = hi if worst_hi is None else max(worst_hi, hi)
    print(f"voltage range at full feed-in: [{worst_lo:.4f}, {worst_hi:.4f}] pu")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration (default: bundled)")
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness (config default 42)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="parallel worker processes (default: available cores)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field; VALUE is parsed as JSON when possible")

    p = argparse.ArgumentParser(prog="gridfall", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gridfall {__version__}")
    sub = p.add_subparsers(dest="verb", metavar="VERB")
    sub.required = True

    t = sub.add_parser("train", parents=[common], help="run the OPF sweep and fit the regression models")
    t.add_argument("--out", required=True, metavar="DIR", help="output directory")
    t.add_argument("--grid", metavar="PATH", help="grid JSON (overrides config)")
    t.add_argument("--learner", choices=LEARNERS, help="regression learner (default nnr)")
    t.add_argument("--max-failed", type=float, default=0.01, metavar="F",
                   help="largest tolerated fraction of failed OPF solves (default 0.01)")
    t.add_argument("--timing", action="store_true", help="record wall-clock time in the sweep report")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", parents=[common], help="run one control case over the profile")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--case", help="NoControl|CentralOpf|OpfPlusRegression|OpfPlusQv or 1-4")
    s.add_argument("--models", metavar="DIR", help="output directory of `gridfall train`")
    s.add_argument("--grid", metavar="PATH")
    s.add_argument("--profile", metavar="PATH")
    s.add_argument("--deadband-eval", type=float, metavar="F", help="dead-band of the evaluation cost, pu")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", parents=[common], help="run the four control cases and tabulate mean costs")
    c.add_argument("--out", required=True, metavar="DIR")
    c.add_argument("--cases", metavar="LIST", help="comma-separated case list, e.g. 1,2 (default all)")
    c.add_argument("--models", metavar="DIR")
    c.add_argument("--grid", metavar="PATH")
    c.add_argument("--profile", metavar="PATH")
    c.add_argument("--deadband-eval", type=float, metavar="F")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("retrain-experiment", parents=[common],
                       help="central OPF under new weights, then stale vs retrained fallback")
    r.add_argument("--out", required=True, metavar="DIR")
    r.add_argument("--models", metavar="DIR", help="output directory of `gridfall train`")
    r.add_argument("--new-params", metavar="PATH", help="JSON cost weights (default c_p=1e5, c_q=5e4)")
    r.add_argument("--learner", choices=LEARNERS, help="learner for retraining (default: as trained)")
    r.add_argument("--deadband-eval", type=float, metavar="F")
    r.set_defaults(func=cmd_retrain_experiment)

    e = sub.add_parser("export-models", parents=[common], help="copy model files and dump lookup tables as CSV")
    e.add_argument("--out", required=True, metavar="DIR")
    e.add_argument("--models", metavar="DIR")
    e.set_defaults(func=cmd_export_models)

    v = sub.add_parser("validate-grid", parents=[common], help="check a grid file and its voltage range")
    v.add_argument("--grid", metavar="PATH")
    v.set_defaults(func=cmd_validate_grid)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GridError, FileNotFoundError, ValueError) as exc:
        print(f"gridfall {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SweepFailed as exc:
        print(f"gridfall {args.verb}: {exc}", file=sys.stderr)
        return EXIT_SWEEP
    except SimulationDiverged as exc:
        print(f"gridfall {args.verb}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
