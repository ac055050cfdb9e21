"""Centralized OPF: voltage/curtailment/reactive cost, DER limits, scenario sweep.

The solver works in the reduced space of the controllable DER set points
(P and Q per unit, as fractions of S_max); the AC power flow is solved inside
every objective evaluation and its Jacobian supplies the adjoint gradient.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .grid import DerKind, GridModel, ScaledGrid, Scenario, all_scenarios, apply_scenario
from .powerflow import Dispatch, PfSolution, jacobian, solve_pf

log = logging.getLogger(__name__)

MIN_PF = 0.9
TAN_PHI = math.tan(math.acos(MIN_PF))


@dataclass(frozen=True)
class CostParams:
    """Weights of the OPF objective.

    ``cost_base_mva`` sets the unit of P and Q inside the cost: per-unit on
    that base, or, when ``None``, fractions of each DER's own S_max.
    """

    c_v: float = 2e3
    c_p: float = 1e6
    c_q: float = 1e4
    deadband_pu: float = 0.01
    cost_base_mva: float | None = 100.0

    def __post_init__(self):
        if min(self.c_v, self.c_p, self.c_q) <= 0:
            raise ValueError("cost weights must be positive")
        if self.deadband_pu < 0:
            raise ValueError("deadband_pu must be non-negative")
        if self.cost_base_mva is not None and self.cost_base_mva <= 0:
            raise ValueError("cost_base_mva must be positive or None")
        if self.c_q >= self.c_p:
            warnings.warn("c_q >= c_p: reactive power is not cheaper than curtailment",
                          stacklevel=2)

    @classmethod
    def from_dict(cls, data: dict) -> "CostParams":
        known = {k: data[k] for k in ("c_v", "c_p", "c_q", "deadband_pu", "cost_base_mva") if k in data}
        return cls(**known)

    def to_dict(self) -> dict:
        return {"c_v": self.c_v, "c_p": self.c_p, "c_q": self.c_q,
                "deadband_pu": self.deadband_pu, "cost_base_mva": self.cost_base_mva}


ORIGINAL_PARAMS = CostParams()
RETRAIN_PARAMS = CostParams(c_v=2e3, c_p=1e5, c_q=5e4)


def voltage_penalty(v_pu, deadband: float):
    """Cubic penalty on the voltage deviation outside ``1 +/- deadband``.

    Zero inside the band; ``(|v - 1| - deadband)**3`` outside, so value, slope
    and curvature all vanish at the band edge.
    """
    excess = np.maximum(np.abs(np.asarray(v_pu, dtype=float) - 1.0) - deadband, 0.0)
    out = excess ** 3
    return float(out) if out.ndim == 0 else out


def voltage_penalty_slope(v_pu, deadband: float):
    dv = np.asarray(v_pu, dtype=float) - 1.0
    excess = np.maximum(np.abs(dv) - deadband, 0.0)
    return 3.0 * excess ** 2 * np.sign(dv)


def _power_bases(grid: ScaledGrid, params: CostParams) -> np.ndarray:
    if params.cost_base_mva is None:
        return np.array([d.s_max_mva for d in grid.ders])
    return np.full(len(grid.ders), params.cost_base_mva)


def cost_terms(grid: ScaledGrid, pf: PfSolution, dispatch: Dispatch, params: CostParams) -> dict:
    if not pf.converged:
        raise ValueError("cost is undefined for a non-converged power flow")
    base = _power_bases(grid, params)
    volt = params.c_v * float(np.sum(voltage_penalty(pf.v_pu, params.deadband_pu)))
    react = 0.0
    curtail = 0.0
    for i in grid.grid.controllable:
        react += (dispatch.q_mvar[i] / base[i]) ** 2
        if grid.ders[i].bus != 1:
            curtail += ((grid.p_avail_mw[i] - dispatch.p_mw[i]) / base[i]) ** 2
    return {"voltage": volt, "reactive": params.c_q * react, "curtailment": params.c_p * curtail}


def total_cost(grid: ScaledGrid, pf: PfSolution, dispatch: Dispatch, params: CostParams) -> float:
    """Voltage penalty over all buses plus reactive and curtailment cost of the controllable DERs."""
    t = cost_terms(grid, pf, dispatch, params)
    return t["voltage"] + t["reactive"] + t["curtailment"]


def capability_q(p_frac, min_pf: float = MIN_PF):
    """Largest |Q| (fraction of S_max) allowed at active power ``p_frac``."""
    tan_phi = math.tan(math.acos(min_pf))
    p = np.clip(p_frac, 0.0, 1.0)
    return np.minimum(p * tan_phi, np.sqrt(np.maximum(1.0 - p * p, 0.0)))


@dataclass(frozen=True)
class OpfResult:
    scenario: Scenario
    dispatch: Dispatch
    pf: PfSolution
    cost: float
    converged: bool
    setpoints_pct: tuple = ()  # ((der_index, p_pct, q_pct), ...) for controllable DERs
    evaluations: int = 0
    message: str = ""

    def setpoint(self, der_index: int) -> tuple[float, float]:
        for i, p, q in self.setpoints_pct:
            if i == der_index:
                return p, q
        raise KeyError(der_index)


class _Problem:
    """Objective/gradient over the free (p, q) pairs with a warm-started inner power flow."""

    def __init__(self, grid: ScaledGrid, params: CostParams, free: list[int], fixed: Dispatch):
        self.grid = grid
        self.params = params
        self.free = free
        self.fixed = fixed
        self.s_max = np.array([grid.ders[i].s_max_mva for i in free])
        self.bus = np.array([grid.ders[i].bus - 1 for i in free])
        self.p_avail = np.array([grid.p_avail_mw[i] for i in free])
        self.base = _power_bases(grid, params)[free]
        self.v = None
        self.theta = None
        self.nfev = 0
        self._cache_x = None
        self._cache = None

    def dispatch(self, x) -> Dispatch:
        p = self.fixed.p_mw.copy()
        q = self.fixed.q_mvar.copy()
        p[self.free] = np.clip(x[0::2], 0.0, None) * self.s_max
        q[self.free] = x[1::2] * self.s_max
        return Dispatch(p, q)

    def evaluate(self, x):
        if self._cache_x is not None and np.array_equal(x, self._cache_x):
            return self._cache
        self.nfev += 1
        disp = self.dispatch(x)
        sol = solve_pf(self.grid, disp, tol=1e-10, max_iter=30, v0=self.v, theta0=self.theta,
                       check_capability=False)
        if not sol.converged:
            sol = solve_pf(self.grid, disp, tol=1e-10, max_iter=30, check_capability=False)
        if not sol.converged:
            raise _PfFailure()
        self.v, self.theta = sol.v_pu, sol.theta_rad
        prm = self.params
        scale = self.s_max / self.base
        p, q = x[0::2], x[1::2]
        curt = (self.p_avail / self.s_max - p) * scale
        qq = q * scale
        f = (prm.c_v * float(np.sum(voltage_penalty(sol.v_pu, prm.deadband_pu)))
             + prm.c_q * float(np.sum(qq ** 2)) + prm.c_p * float(np.sum(curt ** 2)))

        # adjoint: dC/dinjection = J^-T dC/dstate
        n = len(sol.v_pu)
        g_state = np.zeros(2 * (n - 1))
        g_state[n - 1:] = prm.c_v * voltage_penalty_slope(sol.v_pu[1:], prm.deadband_pu)
        grad = np.zeros_like(x)
        if np.any(g_state):
            lam = np.linalg.solve(jacobian(self.grid.grid.ybus, sol.v_pu, sol.theta_rad).T, g_state)
            to_pu = self.s_max / self.grid.grid.s_base_mva
            nz = self.bus > 0
            grad[0::2][nz] = lam[self.bus[nz] - 1] * to_pu[nz]
            grad[1::2][nz] = lam[n - 1 + self.bus[nz] - 1] * to_pu[nz]
        grad[0::2] += -2.0 * prm.c_p * curt * scale
        grad[1::2] += 2.0 * prm.c_q * qq * scale
        self._cache_x = np.array(x, copy=True)
        self._cache = (f, grad, sol)
        return self._cache

    def fun(self, x):
        return self.evaluate(x)[0]

    def jac(self, x):
        return self.evaluate(x)[1]


class _PfFailure(RuntimeError):
    pass


def _project(x, pmax_frac, min_pf):
    x = np.array(x, dtype=float)
    p = np.clip(x[0::2], 0.0, pmax_frac)
    lim = capability_q(p, min_pf)
    q = np.clip(x[1::2], -lim, lim)
    q = np.where(np.abs(q) < 1e-12, 0.0, q)
    x[0::2], x[1::2] = p, q
    return x


def _constraints(n_free: int, min_pf: float):
    tan_phi = math.tan(math.acos(min_pf))
    cons = []
    for k in range(n_free):
        ip, iq = 2 * k, 2 * k + 1

        def pf_hi(x, ip=ip, iq=iq):
            return tan_phi * x[ip] - x[iq]

        def pf_hi_jac(x, ip=ip, iq=iq):
            g = np.zeros_like(x)
            g[ip], g[iq] = tan_phi, -1.0
            return g

        def pf_lo(x, ip=ip, iq=iq):
            return tan_phi * x[ip] + x[iq]

        def pf_lo_jac(x, ip=ip, iq=iq):
            g = np.zeros_like(x)
            g[ip], g[iq] = tan_phi, 1.0
            return g

        def smax(x, ip=ip, iq=iq):
            return 1.0 - x[ip] ** 2 - x[iq] ** 2

        def smax_jac(x, ip=ip, iq=iq):
            g = np.zeros_like(x)
            g[ip], g[iq] = -2 * x[ip], -2 * x[iq]
            return g

        cons += [
            {"type": "ineq", "fun": pf_hi, "jac": pf_hi_jac},
            {"type": "ineq", "fun": pf_lo, "jac": pf_lo_jac},
            {"type": "ineq", "fun": smax, "jac": smax_jac},
        ]
    return cons


def solve_opf(grid: ScaledGrid, params: CostParams, init: Dispatch | None = None,
              min_pf: float = MIN_PF, maxiter: int = 200) -> OpfResult:
    """Minimize the OPF cost over the controllable DER set points of ``grid``.

    Non-controllable units are pinned at full available power and unity power
    factor. ``init`` defaults to full feed-in with Q = 0, which also settles the
    Q-sign tie: a start at Q = 0 never leaves it unless the voltage term pulls.
    """
    g = grid.grid
    if not g.controllable:
        raise ValueError("grid has no controllable DER")
    base = Dispatch.full_feed_in(grid)
    free = [i for i in g.controllable if grid.p_avail_mw[i] > 0]
    fixed_p = base.p_mw.copy()
    fixed_q = base.q_mvar.copy()
    for i in g.controllable:
        if grid.p_avail_mw[i] <= 0:
            fixed_p[i] = fixed_q[i] = 0.0
    fixed = Dispatch(fixed_p, fixed_q)

    if init is None:
        init = base
    problem = _Problem(grid, params, free, fixed)
    pmax_frac = problem.p_avail / problem.s_max if free else np.zeros(0)
    x0 = np.zeros(2 * len(free))
    for k, i in enumerate(free):
        x0[2 * k] = init.p_mw[i] / grid.ders[i].s_max_mva
        x0[2 * k + 1] = init.q_mvar[i] / grid.ders[i].s_max_mva
    x0 = _project(x0, pmax_frac, min_pf)

    converged = True
    message = "no free variables"
    x = x0
    if free:
        bounds = []
        for k in range(len(free)):
            bounds += [(0.0, float(pmax_frac[k])), (-1.0, 1.0)]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = minimize(problem.fun, x0, jac=problem.jac, method="SLSQP", bounds=bounds,
                               constraints=_constraints(len(free), min_pf),
                               options={"ftol": 1e-12, "maxiter": maxiter})
            x = res.x
            message = str(res.message)
            converged = bool(res.success)
            if not converged:
                # SLSQP stalls on flat optima; keep the point when it is no worse than the start
                xp = _project(res.x, pmax_frac, min_pf)
                f_end = problem.fun(xp)
                f_start = problem.fun(x0)
                if res.status in (8, 9) and f_end <= f_start * (1 + 1e-12) + 1e-12:
                    converged = True
                    x = xp
        except _PfFailure:
            converged = False
            message = "power flow diverged inside the OPF"
        x = _project(x, pmax_frac, min_pf)

    dispatch = problem.dispatch(x) if free else fixed
    pf = solve_pf(grid, dispatch)
    if not pf.converged:
        converged = False
        message = "final power flow diverged"
        cost = math.nan
    else:
        cost = total_cost(grid, pf, dispatch, params)
    setpoints = tuple(
        (i, 100.0 * dispatch.p_mw[i] / grid.ders[i].s_max_mva,
         100.0 * dispatch.q_mvar[i] / grid.ders[i].s_max_mva)
        for i in g.controllable
    )
    return OpfResult(grid.scenario, dispatch, pf, cost, converged, setpoints, problem.nfev, message)


# -- sweep ------------------------------------------------------------------------


@dataclass
class SweepResult:
    results: list[OpfResult]
    params: CostParams
    failed: list[Scenario] = field(default_factory=list)

    @property
    def n_converged(self) -> int:
        return sum(r.converged for r in self.results)

    def report(self) -> dict:
        return {
            "scenarios": len(self.results),
            "converged": self.n_converged,
            "failed": len(self.failed),
            "failed_scenarios": [[s.load_pct, s.pv_pct, s.wind_pct] for s in self.failed],
            "cost_params": self.params.to_dict(),
        }


def _solve_chunk(args):
    grid, params, scenarios = args
    return [solve_opf(apply_scenario(grid, sc), params) for sc in scenarios]


def run_sweep(grid: GridModel, params: CostParams, jobs: int = 1,
              scenarios: list[Scenario] | None = None) -> SweepResult:
    """Solve the OPF for every lattice scenario (all 21**3 by default).

    Results come back in scenario order whatever ``jobs`` is; each solve is a
    pure function of its scenario, so the output does not depend on the split.
    """
    if scenarios is None:
        scenarios = all_scenarios()
    scenarios = sorted(scenarios)
    if jobs <= 1 or len(scenarios) < 2:
        results = _solve_chunk((grid, params, scenarios))
    else:
        n_chunks = min(len(scenarios), jobs * 8)
        chunks = [scenarios[i::n_chunks] for i in range(n_chunks)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_solve_chunk, [(grid, params, c) for c in chunks]))
        by_key = {r.scenario: r for part in parts for r in part}
        results = [by_key[sc] for sc in scenarios]
    failed = [r.scenario for r in results if not r.converged]
    if failed:
        log.warning("%d of %d OPF scenarios failed", len(failed), len(results))
    return SweepResult(results, params, failed)


# -- training data --------------------------------------------------------------

TRAINING_HEADER = ["load_f", "pv_f", "wind_f", "v_pu", "theta_rad", "p_sp_pct", "q_sp_pct",
                   "cost", "converged"]


@dataclass(frozen=True)
class TrainingRow:
    scenario: Scenario
    v_pu: float
    theta_rad: float
    p_sp_pct: float
    q_sp_pct: float
    cost: float
    converged: bool

    def operating_point(self, kind: DerKind) -> int:
        return self.scenario.der_pct(kind)


def training_rows(grid: GridModel, sweep: SweepResult, der_index: int) -> list[TrainingRow]:
    bus = grid.ders[der_index].bus - 1
    rows = []
    for r in sweep.results:
        p, q = r.setpoint(der_index)
        rows.append(TrainingRow(r.scenario, float(r.pf.v_pu[bus]), float(r.pf.theta_rad[bus]),
                                float(p), float(q), float(r.cost), bool(r.converged)))
    return rows


def write_training_csv(rows: list[TrainingRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAINING_HEADER)
        for r in rows:
            s = r.scenario
            w.writerow([s.load_factor, s.pv_factor, s.wind_factor, repr(r.v_pu),
                        repr(r.theta_rad), repr(r.p_sp_pct), repr(r.q_sp_pct),
                        repr(r.cost), int(r.converged)])


def read_training_csv(path) -> list[TrainingRow]:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRAINING_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            sc = Scenario.from_factors(float(rec["load_f"]), float(rec["pv_f"]), float(rec["wind_f"]))
            rows.append(TrainingRow(sc, float(rec["v_pu"]), float(rec["theta_rad"]),
                                    float(rec["p_sp_pct"]), float(rec["q_sp_pct"]),
                                    float(rec["cost"]), rec["converged"] == "1"))
    return rows
