"""Voltage-to-setpoint learners: straight line, continuous piecewise line, k-NN table."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class Channel(str, Enum):
    P = "P"
    Q = "Q"

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 100.0) if self is Channel.P else (-100.0, 100.0)


class ModelKind(str, Enum):
    LINEAR = "Linear"
    PIECEWISE = "PiecewiseLinear"
    AUTO = "Auto"
    NNR = "NearestNeighbour"


class Origin(str, Enum):
    OFFLINE = "OfflineSweep"
    ONLINE = "OnlineSetpoint"


@dataclass(frozen=True)
class TrainingSample:
    v_pu: float
    theta_rad: float
    setpoint_pct: float
    origin: Origin = Origin.OFFLINE

    def __post_init__(self):
        if not self.v_pu > 0:
            raise ValueError(f"v_pu must be positive, got {self.v_pu}")


@dataclass(frozen=True)
class RegressionModel:
    """A fitted model; ``payload`` is the JSON-ready parameter block for ``kind``.

    Linear: ``{"slope", "intercept"}`` (plus ``"angle_slope"`` when fitted with
    the angle). PiecewiseLinear: ``{"breakpoints": [...], "segments":
    [[slope, intercept], ...]}``. NearestNeighbour: ``[[v_center, value], ...]``.
    """

    kind: ModelKind
    payload: object
    channel: Channel | None = None
    _table: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind is ModelKind.NNR:
            table = np.asarray(self.payload, dtype=float)
            if table.ndim != 2 or table.shape[1] != 2 or len(table) == 0:
                raise ValueError("NNR payload must be a non-empty [[v, value], ...] table")
            if np.any(np.diff(table[:, 0]) <= 0):
                raise ValueError("NNR table voltages must be strictly increasing")
            object.__setattr__(self, "_table", (table[:, 0].copy(), table[:, 1].copy()))

    @property
    def table(self) -> tuple[np.ndarray, np.ndarray]:
        if self._table is None:
            raise AttributeError(f"{self.kind.value} model has no lookup table")
        return self._table


def _clamp(value: float, channel: Channel | None) -> float:
    lo, hi = channel.bounds if channel is not None else (-100.0, 100.0)
    return float(min(max(value, lo), hi))


def _arrays(samples: Sequence[TrainingSample]):
    v = np.array([s.v_pu for s in samples], dtype=float)
    y = np.array([s.setpoint_pct for s in samples], dtype=float)
    return v, y


# -- linear -----------------------------------------------------------------------


def fit_linear(samples: Sequence[TrainingSample], channel: Channel | None = None,
               use_angle: bool = False) -> RegressionModel:
    """Ordinary least squares of setpoint on voltage (and optionally angle)."""
    if not samples:
        raise ValueError("fit_linear needs at least one sample")
    v, y = _arrays(samples)
    if len(samples) < 2 or np.ptp(v) == 0:
        return RegressionModel(ModelKind.LINEAR, {"slope": 0.0, "intercept": math.fsum(y) / len(y)},
                               channel)
    cols = [np.ones_like(v), v]
    if use_angle:
        cols.append(np.array([s.theta_rad for s in samples], dtype=float))
    coef, *_ = np.linalg.lstsq(np.column_stack(cols), y, rcond=None)
    payload = {"slope": float(coef[1]), "intercept": float(coef[0])}
    if use_angle:
        payload["angle_slope"] = float(coef[2])
    return RegressionModel(ModelKind.LINEAR, payload, channel)


# -- piecewise --------------------------------------------------------------------

N_BREAKPOINT_CANDIDATES = 50


def breakpoint_candidates(v: np.ndarray, n: int = N_BREAKPOINT_CANDIDATES) -> np.ndarray:
    lo, hi = np.percentile(v, [5.0, 95.0])
    return np.linspace(lo, hi, n)


def _hinge_design(v, knots):
    return np.column_stack([np.ones_like(v), v] + [np.maximum(v - t, 0.0) for t in knots])


def _hinge_sse(v, y, knots):
    x = _hinge_design(v, knots)
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    r = y - x @ coef
    return float(r @ r), coef


def _search_knots(v, y, n_knots, candidates):
    """Exhaustive grid search, then coordinate refinement inside the winning cells."""
    if n_knots == 0:
        return (), _hinge_sse(v, y, ())[0]
    best, best_sse = None, math.inf
    if n_knots == 1:
        for t in candidates:
            sse, _ = _hinge_sse(v, y, (t,))
            if sse < best_sse - 1e-15:
                best, best_sse = (t,), sse
    else:
        for i, t1 in enumerate(candidates):
            for t2 in candidates[i + 1:]:
                sse, _ = _hinge_sse(v, y, (t1, t2))
                if sse < best_sse - 1e-15:
                    best, best_sse = (t1, t2), sse
    cell = candidates[1] - candidates[0] if len(candidates) > 1 else 0.0
    if cell <= 0:
        return best, best_sse
    from scipy.optimize import minimize_scalar

    knots = list(best)
    for _ in range(2):
        for j in range(len(knots)):
            lo = knots[j] - cell
            hi = knots[j] + cell
            if j > 0:
                lo = max(lo, knots[j - 1])
            if j + 1 < len(knots):
                hi = min(hi, knots[j + 1])

            def obj(t, j=j):
                trial = list(knots)
                trial[j] = t
                return _hinge_sse(v, y, trial)[0]

            res = minimize_scalar(obj, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-9 * max(1.0, abs(knots[j]))})
            if res.fun < best_sse:
                knots[j], best_sse = float(res.x), float(res.fun)
    return tuple(knots), best_sse


def _segments_from_hinge(knots, coef):
    a, b = float(coef[0]), float(coef[1])
    segs = [[b, a]]
    for t, c in zip(knots, coef[2:]):
        b, a = b + float(c), a - float(c) * t
        segs.append([b, a])
    return segs


def fit_piecewise(samples: Sequence[TrainingSample], max_breakpoints: int = 2,
                  channel: Channel | None = None) -> RegressionModel:
    """Continuous piecewise-linear least squares with up to ``max_breakpoints`` knots.

    Every knot count from 0 to ``max_breakpoints`` is tried and the lowest SSE
    wins, with fewer knots preferred on (numerical) ties.
    """
    if not 0 <= max_breakpoints <= 2:
        raise ValueError("max_breakpoints must be 0, 1 or 2")
    v, y = _arrays(samples)
    if len(samples) < 2 or np.ptp(v) == 0:
        return fit_linear(samples, channel)
    max_breakpoints = min(max_breakpoints, len(samples) // 2 - 1)
    if max_breakpoints <= 0:
        return fit_linear(samples, channel)
    order = np.lexsort((np.arange(len(v)), v))
    v, y = v[order], y[order]
    cands = breakpoint_candidates(v)
    best_knots, best_sse = (), _hinge_sse(v, y, ())[0]
    scale = float(y @ y) + 1.0
    for nk in range(1, max_breakpoints + 1):
        knots, sse = _search_knots(v, y, nk, cands)
        if sse < best_sse - 1e-12 * scale:
            best_knots, best_sse = knots, sse
    if not best_knots:
        return fit_linear(samples, channel)
    _, coef = _hinge_sse(v, y, best_knots)
    payload = {"breakpoints": [float(t) for t in best_knots],
               "segments": _segments_from_hinge(best_knots, coef)}
    return RegressionModel(ModelKind.PIECEWISE, payload, channel)


def piecewise_sse(model: RegressionModel, samples: Sequence[TrainingSample]) -> float:
    v, y = _arrays(samples)
    pred = np.array([_evaluate(model, x) for x in v])
    return float(np.sum((y - pred) ** 2))


# -- automatic selection ------------------------------------------------------------


def fit_auto(samples: Sequence[TrainingSample], channel: Channel | None = None) -> RegressionModel:
    """Pick linear, 1-knot or 2-knot piecewise by hold-out error.

    Samples are ordered by voltage and every fifth one is held out (80/20). The
    winner is refitted on all samples; ties go to the simpler model. Below five
    samples nothing can be held out and the linear fit is returned.
    """
    if len(samples) < 5:
        return fit_linear(samples, channel)
    order = sorted(range(len(samples)), key=lambda i: (samples[i].v_pu, i))
    train = [samples[i] for j, i in enumerate(order) if j % 5 != 4]
    valid = [samples[i] for j, i in enumerate(order) if j % 5 == 4]

    def val_err(model):
        return math.fsum((s.setpoint_pct - _evaluate(model, s.v_pu)) ** 2 for s in valid) / len(valid)

    best_nk, best_err = 0, val_err(fit_linear(train, channel))
    for nk in (1, 2):
        if len(train) < (nk + 1) * 2:
            break
        m = fit_piecewise(train, nk, channel)
        got = len(m.payload["breakpoints"]) if m.kind is ModelKind.PIECEWISE else 0
        if got != nk:
            continue
        err = val_err(m)
        if err < best_err - (1e-9 * best_err + 1e-12):
            best_nk, best_err = nk, err
    if best_nk == 0:
        return fit_linear(samples, channel)
    return fit_piecewise(samples, best_nk, channel)


# -- nearest neighbour ----------------------------------------------------------------


def knn_mean(v: np.ndarray, y: np.ndarray, query: float, k: int) -> float:
    """Mean response of the ``k`` samples nearest ``query``; distance ties go to the lower index."""
    d = np.abs(v - query)
    idx = np.argsort(d, kind="stable")[: min(k, len(v))]
    return math.fsum(y[idx]) / len(idx)


def nnr_centers(v: np.ndarray, sections: int) -> np.ndarray:
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi - lo <= 1e-12:
        # a single voltage still gets a strictly increasing table
        lo, hi = lo - 5e-5, hi + 5e-5
    width = (hi - lo) / sections
    return lo + (np.arange(sections) + 0.5) * width


def fit_nnr(samples: Sequence[TrainingSample], k: int = 20, sections: int = 100,
            channel: Channel | None = None) -> RegressionModel:
    """Lookup table of k-NN means at the centers of ``sections`` equal voltage cells."""
    if not samples:
        raise ValueError("fit_nnr needs at least one sample")
    if k < 1 or sections < 1:
        raise ValueError("k and sections must be >= 1")
    v, y = _arrays(samples)
    kk = min(k, len(v))
    centers = nnr_centers(v, sections)
    dist = np.abs(v[None, :] - centers[:, None])
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :kk]
    values = [math.fsum(y[row]) / kk for row in nearest]
    table = [[float(c), float(val)] for c, val in zip(centers, values)]
    return RegressionModel(ModelKind.NNR, table, channel)


# -- prediction ------------------------------------------------------------------------


def _evaluate(model: RegressionModel, v_pu: float, theta_rad: float = 0.0) -> float:
    kind = model.kind
    if kind is ModelKind.NNR:
        centers, values = model.table
        return float(values[int(np.argmin(np.abs(centers - v_pu)))])
    if kind is ModelKind.LINEAR:
        p = model.payload
        return p["intercept"] + p["slope"] * v_pu + p.get("angle_slope", 0.0) * theta_rad
    if kind is ModelKind.PIECEWISE:
        bps = model.payload["breakpoints"]
        seg = model.payload["segments"][int(np.searchsorted(bps, v_pu, side="right"))]
        return seg[0] * v_pu + seg[1]
    raise ValueError(f"cannot evaluate model kind {kind}")


def predict(model: RegressionModel, v_pu: float, theta_rad: float = 0.0) -> float:
    """Setpoint (% of S_max) for a local voltage, clamped to the channel range."""
    return _clamp(_evaluate(model, v_pu, theta_rad), model.channel)


def fit(learner: str | ModelKind, samples: Sequence[TrainingSample], channel: Channel | None = None,
        k: int = 20, sections: int = 100, max_breakpoints: int = 2) -> RegressionModel:
    kind = ModelKind(learner) if not isinstance(learner, ModelKind) else learner
    if kind is ModelKind.NNR:
        return fit_nnr(samples, k, sections, channel)
    if kind is ModelKind.LINEAR:
        return fit_linear(samples, channel)
    if kind is ModelKind.PIECEWISE:
        return fit_piecewise(samples, max_breakpoints, channel)
    return fit_auto(samples, channel)


LEARNER_ALIASES = {
    "nnr": ModelKind.NNR,
    "linear": ModelKind.LINEAR,
    "piecewise": ModelKind.PIECEWISE,
    "auto": ModelKind.AUTO,
}
