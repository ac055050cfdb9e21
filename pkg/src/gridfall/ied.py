"""Field IED control: remote pass-through, failure detection, regression fallback.

All setpoints are percentages of the DER's S_max. Positive Q is injection
(capacitive, voltage-raising).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .grid import quantize_down
from .regression import BucketSet, ModelStore, Origin, RegressionModelSet

MIN_PF = 0.9
TAN_PHI = math.tan(math.acos(MIN_PF))
STALE_AFTER_S = 60.0
TRANSITION_STEPS = 5
V_EMERGENCY_LOW = 0.9
V_EMERGENCY_HIGH = 1.1
EMERGENCY_STEP_PCT = 10


class Mode(str, Enum):
    REMOTE = "Remote"
    TRANSITION = "Transition"
    FALLBACK = "Fallback"
    EMERGENCY = "Emergency"


class FallbackStrategy(str, Enum):
    REGRESSION = "regression"
    QV = "qv"
    HOLD = "hold"


@dataclass(frozen=True)
class SetpointMessage:
    der_id: int
    p_sp_pct: float
    q_sp_pct: float
    operating_point_pct: int
    timestamp: float


@dataclass(frozen=True)
class ControlDecision:
    p_cmd_pct: float
    q_cmd_pct: float
    mode: Mode
    reason: str
    t: float = 0.0
    v_pu: float = float("nan")


def detect_failure(last_msg_time: float, now: float, stale_after: float = STALE_AFTER_S) -> bool:
    """True once the newest setpoint is strictly older than ``stale_after`` seconds."""
    if stale_after <= 0:
        raise ValueError("stale_after must be positive")
    return now - last_msg_time > stale_after


def q_limit(p_pct: float, s_max_pct: float = 100.0, min_pf: float = MIN_PF) -> float:
    p = min(max(p_pct, 0.0), s_max_pct)
    return min(p * math.tan(math.acos(min_pf)), math.sqrt(max(s_max_pct * s_max_pct - p * p, 0.0)))


def limit_capability(p_pct: float, q_pct: float, s_max_pct: float = 100.0,
                     min_pf: float = MIN_PF) -> tuple[float, float]:
    """Clip P to [0, S_max], then |Q| to the tighter of the pf and apparent-power bounds."""
    p = min(max(float(p_pct), 0.0), s_max_pct)
    lim = q_limit(p, s_max_pct, min_pf)
    q = min(max(float(q_pct), -lim), lim)
    return p, q


def qv_control(v_pu: float, p_avail_pct: float, v_low: float = 0.95, v_high: float = 1.05,
               min_pf: float = MIN_PF) -> ControlDecision:
    """Linear Q(V) droop: full capacitive Q at ``v_low``, full inductive at ``v_high``."""
    p = float(quantize_down(p_avail_pct / 100.0))
    lim = q_limit(p, min_pf=min_pf)
    mid = 0.5 * (v_low + v_high)
    frac = min(max((mid - v_pu) / (0.5 * (v_high - v_low)), -1.0), 1.0)
    return ControlDecision(p, frac * lim, Mode.FALLBACK, "qv", v_pu=v_pu)


def fixed_pf_control(p_avail_pct: float) -> ControlDecision:
    """Unity power factor at the available P, rounded down to the 5 % lattice."""
    return ControlDecision(float(quantize_down(p_avail_pct / 100.0)), 0.0, Mode.REMOTE, "fixed-pf")


class Ramp:
    """Linear move of a (P, Q) command toward a target over a fixed number of cycles.

    ``retarget(restart=True)`` starts a fresh ramp of ``steps`` cycles from the
    current command; with ``restart=False`` the endpoint moves but the remaining
    cycle count is kept, so the ramp still finishes on schedule.
    """

    def __init__(self, value: tuple[float, float], steps: int = TRANSITION_STEPS):
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.steps = steps
        self.value = (float(value[0]), float(value[1]))
        self.target = self.value
        self.remaining = 0
        self.step_index = 0

    @property
    def done(self) -> bool:
        return self.remaining == 0

    def retarget(self, target: tuple[float, float], restart: bool = True) -> None:
        target = (float(target[0]), float(target[1]))
        if target == self.target and not self.done:
            return
        if target == self.value:
            self.target, self.remaining, self.step_index = target, 1, self.steps - 1
            return
        self.target = target
        if restart or self.done:
            self.remaining, self.step_index = self.steps, 0

    def advance(self) -> tuple[float, float]:
        if self.remaining == 0:
            return self.value
        if self.remaining == 1:
            self.value = self.target
        else:
            p0, q0 = self.value
            p1, q1 = self.target
            self.value = (p0 + (p1 - p0) / self.remaining, q0 + (q1 - q0) / self.remaining)
        self.remaining -= 1
        self.step_index += 1
        return self.value

    def jump(self, value: tuple[float, float]) -> None:
        self.value = self.target = (float(value[0]), float(value[1]))
        self.remaining = 0


class FieldIed:
    """Control state of the field IED in front of one controllable DER."""

    def __init__(self, der_id: int, models: RegressionModelSet | ModelStore | None = None,
                 buckets: BucketSet | None = None, fallback: FallbackStrategy | str = FallbackStrategy.REGRESSION,
                 p_max_pct: float = 100.0, stale_after: float = STALE_AFTER_S,
                 transition_steps: int = TRANSITION_STEPS, min_pf: float = MIN_PF,
                 start_time: float = 0.0, initial_command: tuple[float, float] = (0.0, 0.0)):
        self.der_id = der_id
        if isinstance(models, RegressionModelSet):
            models = ModelStore(models)
        self.models = models
        self.buckets = buckets
        self.fallback = FallbackStrategy(fallback)
        if self.fallback is FallbackStrategy.REGRESSION and models is None:
            raise ValueError("regression fallback needs a model set")
        self.p_max_pct = p_max_pct
        self.stale_after = stale_after
        self.min_pf = min_pf
        self.mode = Mode.REMOTE
        # the controller IED synchronises every field IED at start-up
        self.last_msg_time = start_time
        self.last_msg: SetpointMessage | None = None
        self.ramp = Ramp(limit_capability(*initial_command, min_pf=min_pf), transition_steps)
        self.emergency_op_pct: int | None = None
        self._pending: SetpointMessage | None = None
        self.log: list[tuple] = []

    @property
    def command(self) -> tuple[float, float]:
        return self.ramp.value

    @property
    def transition_step(self) -> int:
        return self.ramp.step_index if self.mode is Mode.TRANSITION else 0

    def _avail(self, op_pct: float) -> float:
        return op_pct * self.p_max_pct / 100.0

    def _limit(self, p: float, q: float, op_pct: float) -> tuple[float, float]:
        return limit_capability(min(p, self._avail(op_pct)), q, min_pf=self.min_pf)

    def _emit(self, t: float, v: float, reason: str, op_pct: float) -> ControlDecision:
        # availability may have dropped since the ramp was planned
        self.ramp.value = self._limit(*self.ramp.value, op_pct)
        p, q = self.ramp.value
        d = ControlDecision(p, q, self.mode, reason, t, v)
        self.log.append((t, self.der_id, self.mode.value, p, q, v, reason))
        return d

    # -- remote path -----------------------------------------------------------

    def process_message(self, msg: SetpointMessage, now: float, v_pu: float,
                        op_pct: int | None = None) -> ControlDecision:
        """Accept a setpoint from the controller IED and act on it in the same cycle."""
        op = msg.operating_point_pct if op_pct is None else op_pct
        if msg.der_id != self.der_id:
            raise ValueError(f"message for DER {msg.der_id} delivered to IED {self.der_id}")
        if self.last_msg is not None and msg.timestamp <= self.last_msg_time:
            return self._hold(now, v_pu, op, "ignored-duplicate")
        if detect_failure(msg.timestamp, now, self.stale_after):
            return self._hold(now, v_pu, op, "ignored-stale")
        self.last_msg_time = msg.timestamp
        self.last_msg = msg
        self._pending = msg
        target = self._limit(msg.p_sp_pct, msg.q_sp_pct, op)
        reason = "setpoint"
        if abs(target[0] - msg.p_sp_pct) > 1e-9 or abs(target[1] - msg.q_sp_pct) > 1e-9:
            reason = "setpoint-clamped"
        if self.mode in (Mode.FALLBACK, Mode.EMERGENCY):
            self.mode = Mode.TRANSITION
            self.emergency_op_pct = None
            self._begin_ramp(target)
        if self.mode is Mode.TRANSITION:
            self.ramp.retarget(target, restart=False)
            self.ramp.advance()
            d = self._emit(now, v_pu, "resync", op)
            if self.ramp.done:
                self.mode = Mode.REMOTE
            return d
        self.ramp.jump(target)
        return self._emit(now, v_pu, reason, op)

    def observe(self, v_pu: float, theta_rad: float = 0.0) -> bool:
        """Record the local voltage reached under the newest setpoint into its bucket."""
        msg, self._pending = self._pending, None
        if msg is None or self.buckets is None:
            return False
        return self.buckets.ingest(msg.operating_point_pct, v_pu, msg.p_sp_pct, msg.q_sp_pct,
                                   theta_rad, Origin.ONLINE)

    def _hold(self, now, v, op, reason) -> ControlDecision:
        p, q = self.ramp.value
        self.ramp.jump(self._limit(p, q, op))
        return self._emit(now, v, reason, op)

    # -- control cycle without a message ------------------------------------------------

    def tick(self, now: float, v_pu: float, op_pct: int) -> ControlDecision:
        """Control cycle in which no setpoint arrived."""
        if detect_failure(self.last_msg_time, now, self.stale_after):
            return self.local_control(now, v_pu, op_pct)
        if self.mode is Mode.TRANSITION:
            self.ramp.advance()
            d = self._emit(now, v_pu, "resync", op_pct)
            if self.ramp.done:
                self.mode = Mode.REMOTE
            return d
        return self._hold(now, v_pu, op_pct, "hold")

    def local_control(self, now: float, v_pu: float, op_pct: int) -> ControlDecision:
        if self.fallback is FallbackStrategy.QV:
            self.mode = Mode.FALLBACK
            d = qv_control(v_pu, self._avail(op_pct), min_pf=self.min_pf)
            self.ramp.jump(self._limit(d.p_cmd_pct, d.q_cmd_pct, op_pct))
            return self._emit(now, v_pu, "qv", op_pct)
        if self.fallback is FallbackStrategy.HOLD:
            self.mode = Mode.FALLBACK
            return self._hold(now, v_pu, op_pct, "hold-last")
        return self.regression_control(now, v_pu, op_pct)

    def regression_control(self, now: float, v_pu: float, op_pct: int) -> ControlDecision:
        """Regression fallback with the voltage-band emergency measures."""
        models = self.models.current
        if v_pu < V_EMERGENCY_LOW:
            p = self._avail(op_pct)
            self.mode = Mode.EMERGENCY
            self.emergency_op_pct = None
            self.ramp.jump(limit_capability(p, q_limit(p, min_pf=self.min_pf), min_pf=self.min_pf))
            return self._emit(now, v_pu, "undervoltage", op_pct)
        if v_pu > V_EMERGENCY_HIGH:
            start = op_pct if self.emergency_op_pct is None else min(self.emergency_op_pct, op_pct)
            self.emergency_op_pct = max(start - EMERGENCY_STEP_PCT, 0)
            self.mode = Mode.EMERGENCY
            p, q = models.predict(self.emergency_op_pct, v_pu)
            self.ramp.jump(self._limit(p, q, self.emergency_op_pct))
            return self._emit(now, v_pu, f"overvoltage-op{self.emergency_op_pct}", op_pct)
        op = op_pct
        reason = "regression"
        if self.emergency_op_pct is not None:
            # climb back 10 % per cycle after an over-voltage episode
            self.emergency_op_pct += EMERGENCY_STEP_PCT
            if self.emergency_op_pct >= op_pct:
                self.emergency_op_pct = None
            else:
                op = self.emergency_op_pct
                reason = f"recovery-op{op}"
        target = self._limit(*models.predict(op, v_pu), op)
        if self.mode in (Mode.REMOTE, Mode.TRANSITION):
            # leaving remote control: move over in a fixed number of cycles
            self._begin_ramp(target)
        elif not self.ramp.done:
            self.ramp.retarget(target, restart=False)
        else:
            self.ramp.jump(target)
        self.mode = Mode.FALLBACK
        if not self.ramp.done:
            self.ramp.advance()
            reason = f"{reason}-ramp{self.ramp.step_index}"
        return self._emit(now, v_pu, reason, op_pct)

    def _begin_ramp(self, target: tuple[float, float]) -> None:
        self.ramp.target = (float(target[0]), float(target[1]))
        self.ramp.remaining, self.ramp.step_index = self.ramp.steps, 0


DECISION_LOG_HEADER = ["t", "der_id", "mode", "p_cmd", "q_cmd", "v_pu", "reason"]


def write_decision_log(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECISION_LOG_HEADER)
        for t, der, mode, p, q, v, reason in rows:
            w.writerow([repr(float(t)), der, mode, repr(float(p)), repr(float(q)), repr(float(v)), reason])


def read_decision_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
