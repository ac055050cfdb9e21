"""Newton-Raphson AC power flow in polar coordinates.

Dense matrices are used throughout: target grids are tens of buses, where
sparse bookkeeping costs more than it saves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridModel, ScaledGrid

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 20
_CAPABILITY_SLACK = 1e-9


def build_ybus(grid: GridModel) -> np.ndarray:
    """Bus admittance matrix (n x n, complex, per-unit) of the pi-model branches."""
    n = grid.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in grid.branches:
        z = complex(br.r_pu, br.x_pu)
        if z == 0:
            raise ValueError(f"zero-impedance branch {br.from_bus}-{br.to_bus}")
        ys = 1.0 / z
        ysh = 0.5j * br.b_pu
        f, t = br.from_bus - 1, br.to_bus - 1
        y[f, f] += ys + ysh
        y[t, t] += ys + ysh
        y[f, t] -= ys
        y[t, f] -= ys
    return y


@dataclass(frozen=True)
class Dispatch:
    """Active/reactive injection of every DER of a grid, in MW / Mvar."""

    p_mw: np.ndarray
    q_mvar: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p_mw, dtype=float).copy()
        q = np.asarray(self.q_mvar, dtype=float).copy()
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError("p_mw and q_mvar must be 1-D arrays of equal length")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p_mw", p)
        object.__setattr__(self, "q_mvar", q)

    def __eq__(self, other):
        if not isinstance(other, Dispatch):
            return NotImplemented
        return np.array_equal(self.p_mw, other.p_mw) and np.array_equal(self.q_mvar, other.q_mvar)

    __hash__ = None

    @classmethod
    def full_feed_in(cls, grid: ScaledGrid) -> "Dispatch":
        """Every DER at its available P and unity power factor."""
        return cls(grid.p_avail_mw, np.zeros(len(grid.ders)))


@dataclass(frozen=True)
class PfSolution:
    v_pu: np.ndarray
    theta_rad: np.ndarray
    converged: bool
    iterations: int
    max_mismatch_pu: float
    slack_s_pu: complex = 0j

    def __eq__(self, other):
        if not isinstance(other, PfSolution):
            return NotImplemented
        return (np.array_equal(self.v_pu, other.v_pu)
                and np.array_equal(self.theta_rad, other.theta_rad)
                and (self.converged, self.iterations, self.max_mismatch_pu, self.slack_s_pu)
                == (other.converged, other.iterations, other.max_mismatch_pu, other.slack_s_pu))

    __hash__ = None


def specified_injection(grid: ScaledGrid, dispatch: Dispatch, check: bool = True) -> np.ndarray:
    """Net complex injection per bus (generation minus load), per-unit."""
    g = grid.grid
    n = g.n_bus
    if len(dispatch.p_mw) != len(g.ders):
        raise ValueError(f"dispatch covers {len(dispatch.p_mw)} DERs, grid has {len(g.ders)}")
    s = -(grid.load_p_mw + 1j * grid.load_q_mvar)
    s = s.astype(complex)
    for d, p, q in zip(g.ders, dispatch.p_mw, dispatch.q_mvar):
        s[d.bus - 1] += p + 1j * q
        if not check:
            continue
        if p < -_CAPABILITY_SLACK:
            raise ValueError(f"negative active power {p} at DER bus {d.bus}")
        if p * p + q * q > d.s_max_mva ** 2 * (1 + _CAPABILITY_SLACK) + _CAPABILITY_SLACK:
            raise ValueError(f"dispatch ({p}, {q}) exceeds S_max={d.s_max_mva} at bus {d.bus}")
    assert s.shape == (n,)
    return s / g.s_base_mva


def _mismatch(ybus, v, theta, s_sched):
    u = v * np.exp(1j * theta)
    i = ybus @ u
    s_calc = u * np.conj(i)
    return u, i, s_sched - s_calc


def jacobian(ybus: np.ndarray, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """d(P, Q)/d(theta, |V|) over the non-slack buses (slack is bus index 0)."""
    u = v * np.exp(1j * theta)
    i = ybus @ u
    # diag(u) @ conj(Y @ diag(du)) + diag(conj(i) * du), written with broadcasting
    du_dth = 1j * u
    ds_dth = u[:, None] * np.conj(ybus * du_dth[None, :])
    ds_dth[np.diag_indices_from(ds_dth)] += np.conj(i) * du_dth
    du_dv = u / v
    ds_dv = u[:, None] * np.conj(ybus * du_dv[None, :])
    ds_dv[np.diag_indices_from(ds_dv)] += np.conj(i) * du_dv
    a = ds_dth[1:, 1:]
    b = ds_dv[1:, 1:]
    return np.block([[a.real, b.real], [a.imag, b.imag]])


def solve_pf(grid: ScaledGrid, dispatch: Dispatch, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, v0: np.ndarray | None = None,
             theta0: np.ndarray | None = None, check_capability: bool = True) -> PfSolution:
    """Solve the nodal power balance for ``dispatch`` on ``grid``.

    Starts flat unless ``v0``/``theta0`` are given. ``iterations`` counts
    mismatch evaluations, so an already balanced start reports 1. A singular
    Jacobian or a non-finite iterate returns ``converged=False`` with the last
    iterate rather than raising. An injection beyond a DER's S_max raises
    ``ValueError`` unless ``check_capability`` is off (optimizer trial points).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    ybus = grid.grid.ybus
    s_sched = specified_injection(grid, dispatch, check_capability)
    n = len(s_sched)
    v = np.ones(n) if v0 is None else np.array(v0, dtype=float)
    theta = np.zeros(n) if theta0 is None else np.array(theta0, dtype=float)
    v[0], theta[0] = 1.0, 0.0
    npq = n - 1

    converged = False
    it = 0
    err = np.inf
    u = v * np.exp(1j * theta)
    while it < max_iter:
        it += 1
        u, i, mis = _mismatch(ybus, v, theta, s_sched)
        f = np.concatenate([mis.real[1:], mis.imag[1:]])
        err = float(np.max(np.abs(f))) if npq else 0.0
        if not np.isfinite(err):
            break
        if err < tol:
            converged = True
            break
        try:
            dx = np.linalg.solve(jacobian(ybus, v, theta), f)
        except np.linalg.LinAlgError:
            break
        theta[1:] += dx[:npq]
        v[1:] += dx[npq:]
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            break
    slack = complex(u[0] * np.conj((ybus[0] @ u)))
    return PfSolution(v, theta, converged, it, err, slack)


def branch_flows(grid: GridModel, sol: PfSolution):
    """Complex power (per-unit) entering each branch from both ends."""
    u = sol.v_pu * np.exp(1j * sol.theta_rad)
    s_from, s_to = [], []
    for br in grid.branches:
        ys = 1.0 / complex(br.r_pu, br.x_pu)
        ysh = 0.5j * br.b_pu
        f, t = br.from_bus - 1, br.to_bus - 1
        i_f = (u[f] - u[t]) * ys + u[f] * ysh
        i_t = (u[t] - u[f]) * ys + u[t] * ysh
        s_from.append(u[f] * np.conj(i_f))
        s_to.append(u[t] * np.conj(i_t))
    return np.array(s_from), np.array(s_to)


def losses_pu(grid: GridModel, sol: PfSolution) -> complex:
    s_from, s_to = branch_flows(grid, sol)
    return complex(np.sum(s_from + s_to))
