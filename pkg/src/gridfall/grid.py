"""Network data model: buses, branches, DERs, scenarios and profiles.

All electrical quantities are stored in physical units (MW, Mvar, MVA) except
branch impedances, which are per-unit on the grid's ``s_base_mva`` and the
bus base voltage.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

LATTICE_STEP_PCT = 5
LATTICE_PCT = tuple(range(0, 101, LATTICE_STEP_PCT))


class GridError(ValueError):
    """Raised when a grid or profile file is malformed or violates an invariant."""


class BusKind(str, Enum):
    SLACK = "Slack"
    PQ = "PQ"


class DerKind(str, Enum):
    PV = "PV"
    WIND = "Wind"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    base_voltage_kv: float
    load_p_mw: float = 0.0
    load_q_mvar: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float
    b_pu: float = 0.0


@dataclass(frozen=True)
class Der:
    bus: int
    kind: DerKind
    s_max_mva: float
    p_max_mw: float
    controllable: bool = False


@dataclass(frozen=True, eq=False)
class GridModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    ders: tuple[Der, ...]
    s_base_mva: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "ders", tuple(self.ders))
        validate_grid(self)

    def __eq__(self, other):
        if not isinstance(other, GridModel):
            return NotImplemented
        return (self.buses, self.branches, self.ders, self.s_base_mva) == (
            other.buses, other.branches, other.ders, other.s_base_mva)

    __hash__ = None

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def controllable(self) -> tuple[int, ...]:
        """Indices into ``ders`` of the dispatchable units."""
        return tuple(i for i, d in enumerate(self.ders) if d.controllable)

    @cached_property
    def ybus(self) -> np.ndarray:
        from .powerflow import build_ybus

        y = build_ybus(self)
        y.setflags(write=False)
        return y


def validate_grid(grid: GridModel) -> None:
    if grid.s_base_mva <= 0:
        raise GridError("s_base_mva must be positive")
    ids = [b.id for b in grid.buses]
    if len(set(ids)) != len(ids):
        raise GridError("duplicate bus ids")
    if ids != list(range(1, len(ids) + 1)):
        raise GridError("bus ids must be contiguous 1..n in order")
    slacks = [b.id for b in grid.buses if b.kind is BusKind.SLACK]
    if len(slacks) != 1:
        raise GridError(f"exactly one Slack bus required, found {len(slacks)}")
    if slacks[0] != 1:
        raise GridError("the Slack bus must be bus 1")
    for b in grid.buses:
        if b.base_voltage_kv <= 0:
            raise GridError(f"bus {b.id}: base_voltage_kv must be positive")
        if b.load_p_mw < 0:
            raise GridError(f"bus {b.id}: negative load_p_mw")
    n = len(ids)
    for br in grid.branches:
        if br.from_bus == br.to_bus:
            raise GridError(f"branch {br.from_bus}-{br.to_bus} is a self loop")
        if not (1 <= br.from_bus <= n and 1 <= br.to_bus <= n):
            raise GridError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
        if br.r_pu < 0 or br.x_pu < 0 or br.b_pu < 0:
            raise GridError(f"branch {br.from_bus}-{br.to_bus}: negative parameter")
        if br.r_pu == 0 and br.x_pu == 0:
            raise GridError(f"branch {br.from_bus}-{br.to_bus}: zero impedance")
    if n > 1 and not _connected(n, grid.branches):
        raise GridError("grid graph is disconnected")
    for d in grid.ders:
        if not 1 <= d.bus <= n:
            raise GridError(f"DER at unknown bus {d.bus}")
        if d.s_max_mva <= 0:
            raise GridError(f"DER at bus {d.bus}: s_max_mva must be positive")
        if not 0 < d.p_max_mw <= d.s_max_mva:
            raise GridError(f"DER at bus {d.bus}: p_max_mw must lie in (0, s_max_mva]")


def _connected(n: int, branches) -> bool:
    adj = {i: [] for i in range(1, n + 1)}
    for br in branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    seen = {1}
    queue = deque([1])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == n


# -- serialization --------------------------------------------------------------


def grid_to_dict(grid: GridModel) -> dict:
    def row(obj):
        d = asdict(obj)
        return {k: (v.value if isinstance(v, Enum) else v) for k, v in d.items()}

    return {
        "s_base_mva": grid.s_base_mva,
        "buses": [row(b) for b in grid.buses],
        "branches": [row(b) for b in grid.branches],
        "ders": [row(d) for d in grid.ders],
    }


def grid_from_dict(data: dict) -> GridModel:
    try:
        buses = [
            Bus(
                id=int(b["id"]),
                kind=BusKind(b["kind"]),
                base_voltage_kv=float(b["base_voltage_kv"]),
                load_p_mw=float(b.get("load_p_mw", 0.0)),
                load_q_mvar=float(b.get("load_q_mvar", 0.0)),
            )
            for b in data["buses"]
        ]
        branches = [
            Branch(int(b["from_bus"]), int(b["to_bus"]), float(b["r_pu"]),
                   float(b["x_pu"]), float(b.get("b_pu", 0.0)))
            for b in data["branches"]
        ]
        ders = [
            Der(int(d["bus"]), DerKind(d["kind"]), float(d["s_max_mva"]),
                float(d["p_max_mw"]), bool(d.get("controllable", False)))
            for d in data.get("ders", [])
        ]
        s_base = float(data.get("s_base_mva", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GridError):
            raise
        raise GridError(f"malformed grid description: {exc!r}") from exc
    return GridModel(buses, branches, ders, s_base)


def load_grid(path) -> GridModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GridError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise GridError(f"{path}: top level must be an object")
    return grid_from_dict(data)


def dump_grid(grid: GridModel, path) -> None:
    Path(path).write_text(json.dumps(grid_to_dict(grid), indent=2) + "\n")


def bundled_grid_path() -> Path:
    return Path(__file__).parent / "data" / "cigre_mv.json"


def bundled_profile_path() -> Path:
    return Path(__file__).parent / "data" / "profile_8h.csv"


# -- scenarios ------------------------------------------------------------------


def _to_pct(value: float, name: str) -> int:
    pct = value * 100.0
    k = round(pct / LATTICE_STEP_PCT)
    if abs(pct - k * LATTICE_STEP_PCT) > 1e-6 or not 0 <= k <= 20:
        raise GridError(f"{name}={value!r} is not on the 5% lattice in [0, 1]")
    return int(k * LATTICE_STEP_PCT)


@dataclass(frozen=True, order=True)
class Scenario:
    """One operating situation; factors are held as integer percentages."""

    load_pct: int
    pv_pct: int
    wind_pct: int

    def __post_init__(self):
        for name in ("load_pct", "pv_pct", "wind_pct"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v not in LATTICE_PCT:
                raise GridError(f"{name}={v!r} is not on the 5% lattice")
            object.__setattr__(self, name, int(v))

    @classmethod
    def from_factors(cls, load: float, pv: float, wind: float) -> "Scenario":
        return cls(_to_pct(load, "load"), _to_pct(pv, "pv"), _to_pct(wind, "wind"))

    @property
    def load_factor(self) -> float:
        return self.load_pct / 100.0

    @property
    def pv_factor(self) -> float:
        return self.pv_pct / 100.0

    @property
    def wind_factor(self) -> float:
        return self.wind_pct / 100.0

    def der_pct(self, kind: DerKind) -> int:
        return self.pv_pct if kind is DerKind.PV else self.wind_pct


def all_scenarios() -> list[Scenario]:
    """The full 21**3 lattice in lexicographic (load, pv, wind) order."""
    return [Scenario(l, p, w) for l in LATTICE_PCT for p in LATTICE_PCT for w in LATTICE_PCT]


@dataclass(frozen=True, eq=False)
class ScaledGrid:
    """A grid with loads and DER availability scaled to one scenario."""

    grid: GridModel
    scenario: Scenario
    load_p_mw: np.ndarray
    load_q_mvar: np.ndarray
    p_avail_mw: np.ndarray

    @property
    def ders(self):
        return self.grid.ders

    def available_pct(self, der_index: int) -> float:
        """Available active power of a DER in % of its S_max."""
        d = self.grid.ders[der_index]
        return 100.0 * self.p_avail_mw[der_index] / d.s_max_mva


def apply_scenario(grid: GridModel, scenario) -> ScaledGrid:
    if not isinstance(scenario, Scenario):
        scenario = Scenario.from_factors(*scenario)
    lf = scenario.load_factor
    load_p = np.array([b.load_p_mw for b in grid.buses]) * lf
    load_q = np.array([b.load_q_mvar for b in grid.buses]) * lf
    p_avail = np.array(
        [d.p_max_mw * (scenario.pv_factor if d.kind is DerKind.PV else scenario.wind_factor)
         for d in grid.ders]
    )
    for arr in (load_p, load_q, p_avail):
        arr.setflags(write=False)
    return ScaledGrid(grid, scenario, load_p, load_q, p_avail)


# -- profiles -------------------------------------------------------------------


def quantize_down(value: float) -> int:
    """Round a [0, 1] factor down to the 5% lattice, returned as a percentage."""
    # 1e-9 guards against 0.15 * 20 == 2.9999999999999996 style artefacts
    return int(math.floor(value * 100.0 / LATTICE_STEP_PCT + 1e-9)) * LATTICE_STEP_PCT


@dataclass(frozen=True)
class ProfileSeries:
    timestep_s: float
    load: tuple[float, ...]
    pv: tuple[float, ...]
    wind: tuple[float, ...]
    _pct: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.timestep_s <= 0:
            raise GridError("timestep_s must be positive")
        if not (len(self.load) == len(self.pv) == len(self.wind)) or not self.load:
            raise GridError("profile columns must be non-empty and of equal length")
        pct = tuple(
            Scenario(quantize_down(l), quantize_down(p), quantize_down(w))
            for l, p, w in zip(self.load, self.pv, self.wind)
        )
        object.__setattr__(self, "_pct", pct)

    def __len__(self) -> int:
        return len(self.load)

    def scenario(self, step: int) -> Scenario:
        return self._pct[step]


def load_profiles(path, grid: GridModel | None = None) -> ProfileSeries:
    """Read a ``t,load,pv,wind`` CSV and quantize every value down to the lattice.

    ``grid`` is accepted for interface symmetry; profiles are grid independent.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise GridError(f"{path}: empty profile file")
    header = [h.strip() for h in rows[0]]
    if header != ["t", "load", "pv", "wind"]:
        raise GridError(f"{path}: header must be t,load,pv,wind, got {header}")
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    if not body:
        raise GridError(f"{path}: no profile rows")
    ts, cols = [], ([], [], [])
    for lineno, r in enumerate(body, start=2):
        if len(r) != 4:
            raise GridError(f"{path}:{lineno}: expected 4 columns, got {len(r)}")
        try:
            t, *vals = (float(c) for c in r)
        except ValueError as exc:
            raise GridError(f"{path}:{lineno}: {exc}") from exc
        for v in vals:
            if not 0.0 <= v <= 1.0:
                raise GridError(f"{path}:{lineno}: value {v} outside [0, 1]")
        ts.append(t)
        for col, v in zip(cols, vals):
            col.append(quantize_down(v) / 100.0)
    dt = ts[1] - ts[0] if len(ts) > 1 else 30.0
    return ProfileSeries(dt, tuple(cols[0]), tuple(cols[1]), tuple(cols[2]))


def write_profile(series_or_arrays, path, timestep_s: float = 30.0) -> None:
    if isinstance(series_or_arrays, ProfileSeries):
        load, pv, wind = series_or_arrays.load, series_or_arrays.pv, series_or_arrays.wind
        timestep_s = series_or_arrays.timestep_s
    else:
        load, pv, wind = series_or_arrays
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "load", "pv", "wind"])
        for i, (l, p, wd) in enumerate(zip(load, pv, wind)):
            w.writerow([f"{i * timestep_s:g}", f"{l:.4f}", f"{p:.4f}", f"{wd:.4f}"])
