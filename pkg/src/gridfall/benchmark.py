"""Builders for the bundled benchmark grid and the synthetic 8-hour profile.

The grid follows the radial configuration of the CIGRE European MV benchmark
(feeder switches S1-S3 open). Bus ``k + 1`` here is benchmark node ``k``; bus 1
is the 110 kV infeed, modelled as the slack. DER sizes are scaled up from the
benchmark so that the two controllable plants (wind at bus 6, PV at bus 11)
can move feeder voltages noticeably.
"""

from __future__ import annotations

import math

import numpy as np

from .grid import Branch, Bus, BusKind, Der, DerKind, GridModel, ProfileSeries

MV_KV = 20.0
HV_KV = 110.0

# ohm/km, ohm/km, nF/km
CABLE = (0.501, 0.716, 151.1749)
OVERHEAD = (0.510, 0.366, 10.09679)

# (node_from, node_to, km, line type)
LINES = [
    (1, 2, 2.82, CABLE),
    (2, 3, 4.42, CABLE),
    (3, 4, 0.61, CABLE),
    (4, 5, 0.56, CABLE),
    (5, 6, 1.54, CABLE),
    (7, 8, 1.67, CABLE),
    (8, 9, 0.32, CABLE),
    (9, 10, 0.77, CABLE),
    (10, 11, 0.33, CABLE),
    (3, 8, 1.30, CABLE),
    (12, 13, 4.89, OVERHEAD),
    (13, 14, 2.99, OVERHEAD),
]

# 110/20 kV, 25 MVA, vk 12.04 %, vkr 0.16 %
TRAFO_MVA = 25.0
TRAFO_VK = 0.1204
TRAFO_VKR = 0.0016

# node: (residential MVA, commercial MVA); the lumped substation loads at
# nodes 1 and 12 are half the benchmark value because the slack is held at 1.0 pu
LOADS = {
    1: (7.65, 2.55),
    3: (0.285, 0.265),
    4: (0.445, 0.0),
    5: (0.750, 0.0),
    6: (0.565, 0.0),
    7: (0.0, 0.090),
    8: (0.605, 0.0),
    9: (0.0, 0.675),
    10: (0.490, 0.080),
    11: (0.340, 0.0),
    12: (7.65, 2.64),
    13: (0.0, 0.040),
    14: (0.215, 0.390),
}
PF_RESIDENTIAL = 0.98
PF_COMMERCIAL = 0.95

# (node, kind, S_max MVA, controllable); P_max = S_max for every unit
DERS = [
    (5, DerKind.WIND, 4.0, True),
    (10, DerKind.PV, 3.0, True),
    (3, DerKind.PV, 0.5, False),
    (4, DerKind.PV, 0.5, False),
    (6, DerKind.PV, 0.6, False),
    (7, DerKind.WIND, 1.5, False),
    (8, DerKind.PV, 0.5, False),
    (9, DerKind.PV, 0.6, False),
    (11, DerKind.PV, 0.5, False),
    (14, DerKind.PV, 0.8, False),
]


def build_cigre_mv(s_base_mva: float = 1.0) -> GridModel:
    z_base = MV_KV ** 2 / s_base_mva
    y_base = 1.0 / z_base
    omega = 2 * math.pi * 50.0

    buses = [Bus(1, BusKind.SLACK, HV_KV)]
    for node in range(1, 15):
        res, com = LOADS.get(node, (0.0, 0.0))
        p = res * PF_RESIDENTIAL + com * PF_COMMERCIAL
        q = res * math.sin(math.acos(PF_RESIDENTIAL)) + com * math.sin(math.acos(PF_COMMERCIAL))
        buses.append(Bus(node + 1, BusKind.PQ, MV_KV, round(p, 6), round(q, 6)))

    scale = s_base_mva / TRAFO_MVA
    r_t = TRAFO_VKR * scale
    x_t = math.sqrt(TRAFO_VK ** 2 - TRAFO_VKR ** 2) * scale
    branches = [
        Branch(1, 2, round(r_t, 9), round(x_t, 9), 0.0),
        Branch(1, 13, round(r_t, 9), round(x_t, 9), 0.0),
    ]
    for a, b, km, (r, x, c) in LINES:
        branches.append(Branch(
            a + 1, b + 1,
            round(r * km / z_base, 9),
            round(x * km / z_base, 9),
            round(omega * c * 1e-9 * km / y_base, 9),
        ))

    ders = [Der(node + 1, kind, s, s, ctrl) for node, kind, s, ctrl in DERS]
    return GridModel(buses, branches, ders, s_base_mva)


def synthetic_profile(seed: int = 42, days: int = 10, steps_per_day: int = 96,
                      timestep_s: float = 30.0) -> ProfileSeries:
    """Ten days of 15-minute data replayed at one step per ``timestep_s``.

    PV follows a clear-sky bell scaled by a daily cloudiness draw, wind holds
    plateaus with smooth ramps between them, and load has a morning and an
    evening peak. Midday PV on light-load days drives feeder voltage up;
    calm evenings at peak load pull it down. Step noise is small because each
    row stands for a 15-minute average.
    """
    rng = np.random.default_rng(seed)
    n = days * steps_per_day
    hours = (np.arange(n) % steps_per_day) * 24.0 / steps_per_day
    day = np.arange(n) // steps_per_day

    clear = np.clip(np.sin(np.pi * (hours - 6.0) / 12.0), 0.0, None) ** 1.3
    cloud = rng.uniform(0.8, 1.0, days)[day]
    pv = clear * cloud * (1.0 + 0.02 * rng.standard_normal(n))
    pv = np.where(clear > 0, pv, 0.0)

    # plateaus of 6-14 h joined by 2 h cosine ramps
    wind = np.empty(n)
    level = rng.uniform(0.2, 1.0)
    i = 0
    while i < n:
        hold = int(rng.integers(24, 57))
        nxt = rng.uniform(0.3, 1.0)
        ramp = 8
        seg = np.concatenate([
            np.full(hold, level),
            level + (nxt - level) * 0.5 * (1 - np.cos(np.linspace(0, np.pi, ramp))),
        ])
        wind[i:i + len(seg)] = seg[: n - i]
        i += len(seg)
        level = nxt
    wind = wind * (1.0 + 0.01 * rng.standard_normal(n))

    weekday = np.where((day % 7) >= 5, 0.8, 1.0)
    shape = (0.35 + 0.30 * np.exp(-((hours - 8.0) / 2.0) ** 2)
             + 0.55 * np.exp(-((hours - 19.0) / 2.5) ** 2))
    load = shape * weekday * (1.0 + 0.01 * rng.standard_normal(n))

    load, pv, wind = (np.clip(a, 0.0, 1.0).round(4) for a in (load, pv, wind))
    return ProfileSeries(timestep_s, tuple(load.tolist()), tuple(pv.tolist()), tuple(wind.tolist()))
