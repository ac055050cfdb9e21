"""Independent reference computations used by the tests."""

import itertools
import math

import numpy as np

from gridfall.opf import total_cost
from gridfall.powerflow import Dispatch, solve_pf

TAN_PHI = math.tan(math.acos(0.9))


def q_levels(p_frac, n=9):
    """``n`` evenly spaced Q values (fraction of S_max) spanning the capability at ``p_frac``."""
    lim = min(p_frac * TAN_PHI, math.sqrt(max(1.0 - p_frac ** 2, 0.0)))
    return np.linspace(-lim, lim, n)


def brute_force_opf(sg, params, p_steps=11, q_steps=9):
    """Best cost over a (P, Q) lattice of every controllable DER, one power flow per point.

    P runs over 0, 10%, ..., 100% of the available power; Q over ``q_steps``
    levels inside the power-factor and apparent-power limits.
    """
    grid = sg.grid
    base = Dispatch.full_feed_in(sg)
    per_der = []
    for i in grid.controllable:
        s = grid.ders[i].s_max_mva
        avail = sg.p_avail_mw[i] / s
        opts = []
        for p in np.linspace(0.0, avail, p_steps):
            for q in q_levels(p, q_steps):
                opts.append((i, p * s, q * s))
        per_der.append(opts)
    best = math.inf
    best_disp = None
    v0 = th0 = None
    for combo in itertools.product(*per_der):
        p = base.p_mw.copy()
        q = base.q_mvar.copy()
        for i, pi, qi in combo:
            p[i], q[i] = pi, qi
        disp = Dispatch(p, q)
        sol = solve_pf(sg, disp, v0=v0, theta0=th0, check_capability=False)
        if not sol.converged:
            sol = solve_pf(sg, disp, check_capability=False)
            if not sol.converged:
                continue
        v0, th0 = sol.v_pu, sol.theta_rad
        c = total_cost(sg, sol, disp, params)
        if c < best:
            best, best_disp = c, disp
    return best, best_disp


def knn_mean(v, y, query, k):
    """Mean of the ``k`` samples nearest to ``query``; ties go to the lower index."""
    order = sorted(range(len(v)), key=lambda i: (abs(v[i] - query), i))
    return math.fsum(y[i] for i in order[:k]) / min(k, len(v))
