"""Bounded per-operating-point training stores for one DER.

A bucket holds joint (v, P, Q) entries so that the eviction rule can weigh the
P and Q distance together; the per-channel sample lists are views of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..grid import LATTICE_PCT
from .learners import Channel, Origin, TrainingSample

DEFAULT_CAPACITY = 512
EVICTION_CANDIDATES = 5


@dataclass(frozen=True)
class BucketEntry:
    v_pu: float
    theta_rad: float
    p_pct: float
    q_pct: float
    origin: Origin = Origin.OFFLINE

    def key(self) -> tuple:
        return dedup_key(self.v_pu, self.p_pct, self.q_pct)


def dedup_key(v_pu: float, p_pct: float, q_pct: float) -> tuple:
    """Voltage rounded to 1e-4 pu, setpoints snapped to the 5 % lattice."""
    return (round(v_pu, 4), int(round(p_pct / 5.0)) * 5, int(round(q_pct / 5.0)) * 5)


@dataclass
class TrainingBucket:
    der_id: int
    operating_point_pct: int
    capacity: int = DEFAULT_CAPACITY
    entries: list[BucketEntry] = field(default_factory=list)
    _keys: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("bucket capacity must be positive")
        if self.operating_point_pct not in LATTICE_PCT:
            raise ValueError(f"operating point {self.operating_point_pct} is not on the 5 % lattice")
        self._keys = {}
        for e in self.entries:
            self._keys[e.key()] = self._keys.get(e.key(), 0) + 1

    def __len__(self):
        return len(self.entries)

    def samples(self, channel: Channel) -> list[TrainingSample]:
        pick = (lambda e: e.p_pct) if Channel(channel) is Channel.P else (lambda e: e.q_pct)
        return [TrainingSample(e.v_pu, e.theta_rad, pick(e), e.origin) for e in self.entries]

    def _drop(self, idx: int) -> BucketEntry:
        e = self.entries.pop(idx)
        k = e.key()
        self._keys[k] -= 1
        if not self._keys[k]:
            del self._keys[k]
        return e

    def add(self, entry: BucketEntry) -> BucketEntry | None:
        """Append without dedup; evicts per :func:`ingest_setpoint` when full."""
        self.entries.append(entry)
        self._keys[entry.key()] = self._keys.get(entry.key(), 0) + 1
        evicted = None
        while len(self.entries) > self.capacity:
            evicted = self._drop(_eviction_victim(self.entries[:-1], entry))
        return evicted

    def copy(self) -> "TrainingBucket":
        return TrainingBucket(self.der_id, self.operating_point_pct, self.capacity, list(self.entries))


def _eviction_victim(existing: list[BucketEntry], new: BucketEntry) -> int:
    by_voltage = sorted(range(len(existing)), key=lambda i: (abs(existing[i].v_pu - new.v_pu), i))
    cands = by_voltage[:EVICTION_CANDIDATES]
    best, best_d = cands[0], -1.0
    for i in cands:
        e = existing[i]
        d = (new.p_pct - e.p_pct) ** 2 + (new.q_pct - e.q_pct) ** 2
        if d > best_d:
            best, best_d = i, d
    return best


def ingest_setpoint(bucket: TrainingBucket, v_pu: float, p_sp_pct: float, q_sp_pct: float,
                    theta_rad: float = 0.0, origin: Origin = Origin.ONLINE) -> bool:
    """Add a received setpoint with its local voltage; returns False for duplicates.

    When the bucket overflows, the victim is chosen among the five stored entries
    nearest in voltage to the new one: the one farthest from the new (P, Q).
    """
    if not v_pu > 0:
        raise ValueError(f"v_pu must be positive, got {v_pu}")
    entry = BucketEntry(float(v_pu), float(theta_rad), float(p_sp_pct), float(q_sp_pct), origin)
    if entry.key() in bucket._keys:
        return False
    bucket.add(entry)
    return True


class BucketSet:
    """The 21 buckets of one DER, keyed by operating point."""

    def __init__(self, der_id: int, capacity: int = DEFAULT_CAPACITY):
        self.der_id = der_id
        self.capacity = capacity
        self.buckets = {op: TrainingBucket(der_id, op, capacity) for op in LATTICE_PCT}

    def __getitem__(self, op_pct: int) -> TrainingBucket:
        return self.buckets[op_pct]

    def __len__(self):
        return sum(len(b) for b in self.buckets.values())

    def ingest(self, op_pct: int, v_pu: float, p_pct: float, q_pct: float,
               theta_rad: float = 0.0, origin: Origin = Origin.ONLINE) -> bool:
        return ingest_setpoint(self.buckets[op_pct], v_pu, p_pct, q_pct, theta_rad, origin)

    def copy(self) -> "BucketSet":
        out = BucketSet(self.der_id, self.capacity)
        out.buckets = {op: b.copy() for op, b in self.buckets.items()}
        return out

    @classmethod
    def from_rows(cls, der_id: int, rows, kind, capacity: int = DEFAULT_CAPACITY) -> "BucketSet":
        """Fill from sweep training rows of a DER of ``kind``, bucketed by operating point.

        Offline rows are stored as given (no dedup) since different scenarios can
        land on the same local voltage; non-converged rows are skipped.
        """
        out = cls(der_id, capacity)
        for r in rows:
            if not r.converged:
                continue
            out.buckets[r.operating_point(kind)].add(
                BucketEntry(r.v_pu, r.theta_rad, r.p_sp_pct, r.q_sp_pct, Origin.OFFLINE))
        return out
