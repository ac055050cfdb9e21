"""Quasi-static co-simulation of grid, controller IED, message bus and field IEDs.

Each step replays one profile row: measure, let the controller solve the OPF
and broadcast, let every field IED decide, solve the physics power flow with
the commanded dispatch, then score the step with the OPF cost function.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .grid import (GridModel, ProfileSeries, Scenario, apply_scenario, bundled_grid_path,
                   bundled_profile_path, load_grid, load_profiles, quantize_down)
from .ied import FallbackStrategy, FieldIed, Mode, SetpointMessage, fixed_pf_control, write_decision_log
from .opf import CostParams, OpfResult, RETRAIN_PARAMS, solve_opf, total_cost
from .powerflow import Dispatch, PfSolution, losses_pu, solve_pf, specified_injection
from .regression import BucketSet, RegressionModelSet, retrain

log = logging.getLogger(__name__)

CONSERVATION_TOL = 1e-6


class ControlCase(str, Enum):
    NO_CONTROL = "NoControl"
    CENTRAL_OPF = "CentralOpf"
    OPF_REGRESSION = "OpfPlusRegression"
    OPF_QV = "OpfPlusQv"

    @property
    def number(self) -> int:
        return list(ControlCase).index(self) + 1

    @property
    def uses_opf(self) -> bool:
        return self is not ControlCase.NO_CONTROL

    @property
    def sees_failures(self) -> bool:
        return self in (ControlCase.OPF_REGRESSION, ControlCase.OPF_QV)

    @classmethod
    def parse(cls, text) -> "ControlCase":
        if isinstance(text, ControlCase):
            return text
        key = str(text).strip().lower().replace("_", "-")
        for case in cls:
            if key in (case.value.lower(), str(case.number)):
                return case
        aliases = {"no-control": cls.NO_CONTROL, "central-opf": cls.CENTRAL_OPF,
                   "regression": cls.OPF_REGRESSION, "opf-regression": cls.OPF_REGRESSION,
                   "qv": cls.OPF_QV, "opf-qv": cls.OPF_QV}
        if key in aliases:
            return aliases[key]
        raise ConfigError(f"unknown control case {text!r}")


class ConfigError(ValueError):
    pass


class SimulationDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    grid: str | None = None
    profile: str | None = None
    training_params: CostParams = CostParams()
    evaluation_params: CostParams = CostParams(deadband_pu=0.0)
    timestep_s: float = 30.0
    horizon_steps: int | None = None
    se_cycle_s: float = 10.0
    opf_cycle_s: float = 30.0
    regression_cycle_s: float = 30.0
    transition_steps: int = 5
    stale_after_s: float = 60.0
    failure_windows: tuple = ()
    case: ControlCase = ControlCase.CENTRAL_OPF
    seed: int = 42
    models_dir: str | None = None
    learner: str = "nnr"
    k: int = 20
    sections: int = 100
    bucket_capacity: int = 512
    meas_noise_pu: float = 0.001

    def __post_init__(self):
        object.__setattr__(self, "case", ControlCase.parse(self.case))
        wins = tuple(sorted((float(a), float(b)) for a, b in self.failure_windows))
        object.__setattr__(self, "failure_windows", wins)
        for a, b in wins:
            if b < a or a < 0:
                raise ConfigError(f"invalid failure window ({a}, {b})")
        for (a0, b0), (a1, b1) in zip(wins, wins[1:]):
            if a1 < b0:
                raise ConfigError(f"failure windows ({a0}, {b0}) and ({a1}, {b1}) overlap")
        for name in ("timestep_s", "se_cycle_s", "opf_cycle_s", "regression_cycle_s", "stale_after_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.horizon_steps is not None and self.horizon_steps <= 0:
            raise ConfigError("horizon_steps must be positive")
        if self.meas_noise_pu < 0:
            raise ConfigError("meas_noise_pu must be non-negative")

    def with_case(self, case) -> "SimConfig":
        return replace(self, case=ControlCase.parse(case))

    def comm_ok(self, t: float) -> bool:
        return not any(a <= t < b for a, b in self.failure_windows)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid, "profile": self.profile,
            "training_params": self.training_params.to_dict(),
            "evaluation_params": self.evaluation_params.to_dict(),
            "timestep_s": self.timestep_s, "horizon_steps": self.horizon_steps,
            "se_cycle_s": self.se_cycle_s, "opf_cycle_s": self.opf_cycle_s,
            "regression_cycle_s": self.regression_cycle_s,
            "transition_steps": self.transition_steps, "stale_after_s": self.stale_after_s,
            "failure_windows": [list(w) for w in self.failure_windows],
            "case": self.case.value, "seed": self.seed, "models_dir": self.models_dir,
            "learner": self.learner, "k": self.k, "sections": self.sections,
            "bucket_capacity": self.bucket_capacity, "meas_noise_pu": self.meas_noise_pu,
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "SimConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key in ("training_params", "evaluation_params"):
                if key in data:
                    data[key] = CostParams.from_dict(data[key])
            if "evaluation_params" not in data and "training_params" in data:
                data["evaluation_params"] = replace(data["training_params"], deadband_pu=0.0)
            for key in ("grid", "profile", "models_dir"):
                if data.get(key) and base_dir is not None and not Path(data[key]).is_absolute():
                    data[key] = str((base_dir / data[key]).resolve())
            if "failure_windows" in data:
                data["failure_windows"] = tuple(tuple(w) for w in data["failure_windows"])
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "SimConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data, path.parent)

    def load_grid(self) -> GridModel:
        path = Path(self.grid) if self.grid else bundled_grid_path()
        if not path.exists():
            raise ConfigError(f"grid file not found: {path}")
        return load_grid(path)

    def load_profile(self) -> ProfileSeries:
        path = Path(self.profile) if self.profile else bundled_profile_path()
        if not path.exists():
            raise ConfigError(f"profile file not found: {path}")
        return load_profiles(path)


def default_failure_window(horizon_steps: int, timestep_s: float, fraction: float = 0.35,
                           start_fraction: float = 0.3) -> tuple[float, float]:
    """A single window covering ``fraction`` of the horizon, aligned to whole steps."""
    start = round(horizon_steps * start_fraction) * timestep_s
    end = start + round(horizon_steps * fraction) * timestep_s
    return (float(start), float(end))


@dataclass
class StepRecord:
    t: float
    scenario: Scenario
    v_pu: np.ndarray
    commands: tuple  # ((der_index, p_pct, q_pct), ...)
    cost: float
    comm_ok: bool
    modes: tuple  # ((der_index, mode), ...)


@dataclass
class RunReport:
    case: ControlCase
    mean_cost: float
    steps: int
    violations: int
    band_excursions: int
    fallback_steps: dict
    config: dict
    records_file: str = "steps.csv"

    def to_dict(self) -> dict:
        return {"case": self.case.value, "case_number": self.case.number, "mean_cost": self.mean_cost,
                "steps": self.steps, "violations": self.violations,
                "band_excursions": self.band_excursions,
                "fallback_steps": {str(k): v for k, v in self.fallback_steps.items()},
                "records_file": self.records_file, "config": self.config}


@dataclass
class RunResult:
    report: RunReport
    records: list[StepRecord]
    decision_logs: dict = field(default_factory=dict)
    buckets: dict = field(default_factory=dict)
    ieds: dict = field(default_factory=dict)

    @property
    def mean_cost(self) -> float:
        return self.report.mean_cost


class OpfCache:
    """Memo of OPF results per (scenario, cost params); the OPF is a pure function of both."""

    def __init__(self):
        self._store: dict = {}

    def get(self, grid: GridModel, scenario: Scenario, params: CostParams) -> OpfResult:
        key = (scenario, params)
        hit = self._store.get(key)
        if hit is None:
            hit = solve_opf(apply_scenario(grid, scenario), params)
            if not hit.converged:
                log.warning("OPF did not converge for %s: %s", scenario, hit.message)
            self._store[key] = hit
        return hit

    def seed_from_sweep(self, sweep) -> None:
        for r in sweep.results:
            self._store[(r.scenario, sweep.params)] = r

    def __len__(self):
        return len(self._store)


def _dispatch(grid, sg, commands: dict) -> Dispatch:
    p = sg.p_avail_mw.copy()
    q = np.zeros(len(grid.ders))
    for i, (pp, qq) in commands.items():
        s = grid.ders[i].s_max_mva
        p[i] = min(pp * s / 100.0, sg.p_avail_mw[i])
        q[i] = qq * s / 100.0
    return Dispatch(p, q)


def _solve(sg, dispatch, warm: PfSolution | None, t: float) -> PfSolution:
    if warm is not None:
        pf = solve_pf(sg, dispatch, v0=warm.v_pu, theta0=warm.theta_rad)
        if pf.converged:
            return pf
    pf = solve_pf(sg, dispatch)
    if not pf.converged:
        raise SimulationDiverged(
            f"power flow diverged at t={t:g} s, scenario {sg.scenario}, mismatch {pf.max_mismatch_pu:.3g}")
    return pf


def check_conservation(sg, dispatch: Dispatch, pf: PfSolution) -> float:
    """Sum of net bus injections minus series and shunt losses (should vanish)."""
    s = specified_injection(sg, dispatch)
    s[0] = pf.slack_s_pu
    return abs(complex(np.sum(s)) - losses_pu(sg.grid, pf))


def _on_cycle(t: float, cycle: float) -> bool:
    r = math.fmod(t, cycle)
    return r < 1e-9 or cycle - r < 1e-9


def run_simulation(config: SimConfig, model_sets: dict | None = None,
                   bucket_sets: dict | None = None, grid: GridModel | None = None,
                   profile: ProfileSeries | None = None, opf_cache: OpfCache | None = None) -> RunResult:
    """Run one case over the profile horizon.

    ``model_sets`` (der index -> RegressionModelSet) is required for the
    regression case. ``bucket_sets`` receive every setpoint the field IEDs accept;
    they are mutated in place.
    """
    grid = grid or config.load_grid()
    profile = profile or config.load_profile()
    horizon = config.horizon_steps or len(profile)
    if horizon > len(profile):
        raise ConfigError(f"horizon of {horizon} steps exceeds the {len(profile)}-step profile")
    dt = config.timestep_s
    for a, b in config.failure_windows:
        if b > horizon * dt + 1e-9:
            raise ConfigError(f"failure window ({a:g}, {b:g}) extends past the horizon ({horizon * dt:g} s)")
    case = config.case
    ctrl = list(grid.controllable)
    cache = opf_cache or OpfCache()

    ieds: dict[int, FieldIed] = {}
    if case.uses_opf:
        strategy = {ControlCase.CENTRAL_OPF: FallbackStrategy.HOLD,
                    ControlCase.OPF_REGRESSION: FallbackStrategy.REGRESSION,
                    ControlCase.OPF_QV: FallbackStrategy.QV}[case]
        if strategy is FallbackStrategy.REGRESSION:
            missing = [i for i in ctrl if not model_sets or i not in model_sets]
            if missing:
                raise ConfigError(f"regression case needs trained models for DERs {missing}; run `gridfall train`")
        sg0 = apply_scenario(grid, profile.scenario(0))
        for i in ctrl:
            d = grid.ders[i]
            ieds[i] = FieldIed(i, model_sets.get(i) if model_sets else None,
                               bucket_sets.get(i) if bucket_sets else None, strategy,
                               p_max_pct=100.0 * d.p_max_mw / d.s_max_mva,
                               stale_after=config.stale_after_s,
                               transition_steps=config.transition_steps,
                               initial_command=(sg0.available_pct(i), 0.0))

    # one draw per bus and step whatever the case, so all cases see the same noise
    rng = np.random.default_rng(config.seed)
    commands = {}
    records: list[StepRecord] = []
    meas_hist: list[tuple[float, np.ndarray]] = []
    warm = None
    for k in range(horizon):
        t = k * dt
        sc = profile.scenario(k)
        sg = apply_scenario(grid, sc)
        if not commands:
            commands = {i: (sg.available_pct(i), 0.0) for i in ctrl}

        noise = config.meas_noise_pu * rng.standard_normal((2, grid.n_bus))

        # (1) local measurement under the commands still in force
        meas = _solve(sg, _dispatch(grid, sg, commands), warm, t)
        meas_hist.append((t, meas.v_pu + noise[0]))
        meas_hist = [(tt, v) for tt, v in meas_hist if tt > t - config.se_cycle_s]
        v_meas = np.mean([v for _, v in meas_hist], axis=0)

        # (2) controller IED
        comm_ok = config.comm_ok(t) or not case.sees_failures
        messages = {}
        if case.uses_opf and _on_cycle(t, config.opf_cycle_s):
            opf = cache.get(grid, sc, config.training_params)
            if comm_ok and opf.converged:
                for i in ctrl:
                    p, q = opf.setpoint(i)
                    messages[i] = SetpointMessage(i, p, q, sc.der_pct(grid.ders[i].kind), t)

        # (3) field IEDs
        modes = []
        for i in ctrl:
            d = grid.ders[i]
            op = quantize_down(sg.p_avail_mw[i] / d.p_max_mw) if d.p_max_mw > 0 else 0
            bus = d.bus - 1
            if not case.uses_opf:
                dec = fixed_pf_control(sg.available_pct(i))
                commands[i] = (dec.p_cmd_pct, dec.q_cmd_pct)
                modes.append((i, Mode.REMOTE.value))
                continue
            ied = ieds[i]
            if i in messages:
                dec = ied.process_message(messages[i], t, float(v_meas[bus]), op)
            elif _on_cycle(t, config.regression_cycle_s):
                dec = ied.tick(t, float(v_meas[bus]), op)
            else:
                dec = None
            commands[i] = ied.command if dec is None else (dec.p_cmd_pct, dec.q_cmd_pct)
            modes.append((i, ied.mode.value))

        # (4) physics
        dispatch = _dispatch(grid, sg, commands)
        pf = _solve(sg, dispatch, meas, t)
        warm = pf
        gap = check_conservation(sg, dispatch, pf)
        if gap > CONSERVATION_TOL:
            raise SimulationDiverged(f"power balance off by {gap:.3g} pu at t={t:g} s")
        for i, ied in ieds.items():
            bus = grid.ders[i].bus - 1
            ied.observe(float(pf.v_pu[bus] + noise[1, bus]), float(pf.theta_rad[bus]))

        # (5) score
        cost = total_cost(sg, pf, dispatch, config.evaluation_params)
        records.append(StepRecord(t, sc, pf.v_pu.copy(),
                                  tuple((i, *commands[i]) for i in ctrl), cost, comm_ok, tuple(modes)))

    costs = [r.cost for r in records]
    v_all = np.array([r.v_pu for r in records])
    fallback = {i: sum(1 for r in records for j, m in r.modes
                       if j == i and m in (Mode.FALLBACK.value, Mode.EMERGENCY.value)) for i in ctrl}
    report = RunReport(
        case=case,
        mean_cost=math.fsum(costs) / len(costs),
        steps=len(records),
        violations=int(np.sum((v_all < 0.9) | (v_all > 1.1))),
        band_excursions=int(np.sum((v_all < 0.95) | (v_all > 1.05))),
        fallback_steps=fallback,
        config=config.to_dict(),
    )
    return RunResult(report, records, {i: ied.log for i, ied in ieds.items()},
                     bucket_sets or {}, ieds)


# -- output files --------------------------------------------------------------------


def _f(x: float) -> str:
    return repr(float(x))


def write_step_records(records: list[StepRecord], path, n_bus: int) -> None:
    if not records:
        raise ValueError("no step records")
    ders = [i for i, *_ in records[0].commands]
    header = (["t", "load_pct", "pv_pct", "wind_pct"] + [f"v_{b + 1}" for b in range(n_bus)]
              + [c for i in ders for c in (f"p_{i}", f"q_{i}")] + [f"mode_{i}" for i in ders]
              + ["cost", "comm_ok"])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            sc = r.scenario
            w.writerow([_f(r.t), sc.load_pct, sc.pv_pct, sc.wind_pct]
                       + [_f(v) for v in r.v_pu]
                       + [_f(x) for _, p, q in r.commands for x in (p, q)]
                       + [m for _, m in r.modes]
                       + [_f(r.cost), int(r.comm_ok)])


def write_run(result: RunResult, out_dir, n_bus: int, prefix: str = "") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps_name = f"{prefix}steps.csv"
    result.report.records_file = steps_name
    write_step_records(result.records, out / steps_name, n_bus)
    for i, rows in result.decision_logs.items():
        write_decision_log(rows, out / f"{prefix}decisions_der{i}.csv")
    path = out / f"{prefix}report.json"
    path.write_text(json.dumps(result.report.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


# -- experiments ---------------------------------------------------------------------


def _pct_diff(a: float, b: float) -> float:
    return 100.0 * (a - b) / b if b else math.nan


@dataclass
class Comparison:
    results: dict  # ControlCase -> RunResult

    def rows(self) -> list[dict]:
        ref1 = self.results.get(ControlCase.NO_CONTROL)
        ref2 = self.results.get(ControlCase.CENTRAL_OPF)
        out = []
        for case in ControlCase:
            if case not in self.results:
                continue
            c = self.results[case].mean_cost
            out.append({
                "case": case.number, "name": case.value, "mean_cost": c,
                "diff_to_case1_pct": _pct_diff(c, ref1.mean_cost) if ref1 else math.nan,
                "diff_to_case2_pct": _pct_diff(c, ref2.mean_cost) if ref2 else math.nan,
            })
        return out

    def mean_costs(self) -> dict:
        return {case: r.mean_cost for case, r in self.results.items()}

    def to_text(self) -> str:
        lines = [f"{'case':<4} {'name':<18} {'mean cost':>12} {'diff to 1 [%]':>14} {'diff to 2 [%]':>14}"]
        for r in self.rows():
            lines.append(f"{r['case']:<4} {r['name']:<18} {r['mean_cost']:>12.4f} "
                         f"{r['diff_to_case1_pct']:>14.2f} {r['diff_to_case2_pct']:>14.2f}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "name", "mean_cost", "diff_to_case1_pct", "diff_to_case2_pct"])
            for r in self.rows():
                w.writerow([r["case"], r["name"], _f(r["mean_cost"]),
                            _f(r["diff_to_case1_pct"]), _f(r["diff_to_case2_pct"])])


def _run_case(args):
    config, model_sets = args
    res = run_simulation(config, model_sets)
    # live IEDs hold locks and cannot cross the process boundary
    res.ieds = {}
    return res


def compare_cases(config: SimConfig, cases=None, model_sets: dict | None = None,
                  jobs: int = 1, opf_cache: OpfCache | None = None) -> Comparison:
    """Run each case on the same grid, profile and failure schedule."""
    cases = [ControlCase.parse(c) for c in (cases or list(ControlCase))]
    cases = sorted(set(cases), key=lambda c: c.number)
    if not config.failure_windows and any(c.sees_failures for c in cases):
        log.warning("no failure windows configured: cases 3/4 never leave remote control")
    configs = [config.with_case(c) for c in cases]
    if jobs > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cases))) as pool:
            runs = list(pool.map(_run_case, [(c, model_sets) for c in configs]))
    else:
        grid, profile = config.load_grid(), config.load_profile()
        cache = opf_cache or OpfCache()
        runs = [run_simulation(c, model_sets, grid=grid, profile=profile, opf_cache=cache) for c in configs]
    return Comparison(dict(zip(cases, runs)))


@dataclass
class RetrainingOutcome:
    central: RunResult
    stale: RunResult
    retrained: RunResult
    retrained_sets: dict

    def rows(self) -> list[dict]:
        a = self.central.mean_cost
        out = []
        for label, name, run in (("A", "CentralOpf", self.central), ("B", "StaleModels", self.stale),
                                 ("C", "RetrainedModels", self.retrained)):
            out.append({"case": label, "name": name, "mean_cost": run.mean_cost,
                        "diff_to_central_pct": _pct_diff(run.mean_cost, a)})
        return out

    def to_text(self) -> str:
        lines = [f"{'case':<4} {'name':<16} {'mean cost':>12} {'diff to A [%]':>14}"]
        for r in self.rows():
            lines.append(f"{r['case']:<4} {r['name']:<16} {r['mean_cost']:>12.4f} {r['diff_to_central_pct']:>14.2f}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "name", "mean_cost", "diff_to_central_pct"])
            for r in self.rows():
                w.writerow([r["case"], r["name"], _f(r["mean_cost"]), _f(r["diff_to_central_pct"])])


def retraining_experiment(config: SimConfig, model_sets: dict, bucket_sets: dict,
                          new_params: CostParams = RETRAIN_PARAMS, learner=None,
                          opf_cache: OpfCache | None = None) -> RetrainingOutcome:
    """Central OPF under new weights feeds the buckets; then stale vs retrained fallback.

    The bucket sets passed in are copied, never mutated.
    """
    grid, profile = config.load_grid(), config.load_profile()
    cache = opf_cache or OpfCache()
    horizon_s = (config.horizon_steps or len(profile)) * config.timestep_s
    new_cfg = replace(config, training_params=new_params,
                      evaluation_params=replace(new_params, deadband_pu=config.evaluation_params.deadband_pu))
    live = {i: b.copy() for i, b in bucket_sets.items()}
    central = run_simulation(new_cfg.with_case(ControlCase.CENTRAL_OPF), None, live, grid, profile, cache)
    retrained = {i: retrain(ms, live[i], learner, config.k, config.sections, trained_at=horizon_s)
                 for i, ms in model_sets.items()}
    fb = new_cfg.with_case(ControlCase.OPF_REGRESSION)
    stale = run_simulation(fb, model_sets, None, grid, profile, cache)
    fresh = run_simulation(fb, retrained, None, grid, profile, cache)
    return RetrainingOutcome(central, stale, fresh, retrained)
