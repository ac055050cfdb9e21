"""Per-DER model sets (21 operating points x {P, Q}), training, retraining and IO."""

from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

from ..grid import LATTICE_PCT, LATTICE_STEP_PCT
from .buckets import BucketSet
from .learners import Channel, LEARNER_ALIASES, ModelKind, RegressionModel, fit, predict

MODEL_FORMAT = 1


@dataclass(frozen=True)
class RegressionModelSet:
    der_id: int
    models: dict  # (Channel, op_pct) -> RegressionModel
    version: int = 1
    trained_at: float = 0.0
    # op points whose model was borrowed from a neighbour because the bucket was empty
    borrowed: tuple = ()

    def __post_init__(self):
        missing = [(c.value, op) for c in Channel for op in LATTICE_PCT if (c, op) not in self.models]
        if missing:
            raise ValueError(f"model set for DER {self.der_id} is missing {missing[:4]}...")

    def model(self, channel: Channel, op_pct: int) -> RegressionModel:
        return self.models[(Channel(channel), int(op_pct))]

    def predict(self, op_pct: int, v_pu: float, theta_rad: float = 0.0) -> tuple[float, float]:
        return (predict(self.model(Channel.P, op_pct), v_pu, theta_rad),
                predict(self.model(Channel.Q, op_pct), v_pu, theta_rad))

    def kinds(self) -> set:
        return {m.kind for m in self.models.values()}


def _fallback_op(op: int, filled: set) -> int | None:
    """Nearest operating point with data, lower one first on equal distance."""
    for d in range(LATTICE_STEP_PCT, 101, LATTICE_STEP_PCT):
        for cand in (op - d, op + d):
            if cand in filled:
                return cand
    return None


def train_model_set(buckets: BucketSet, learner: str | ModelKind = ModelKind.NNR, k: int = 20,
                    sections: int = 100, version: int = 1, trained_at: float = 0.0) -> RegressionModelSet:
    """Fit all 42 models of one DER from its buckets."""
    kind = LEARNER_ALIASES.get(learner, learner) if isinstance(learner, str) else learner
    kind = ModelKind(kind)
    filled = {op for op in LATTICE_PCT if len(buckets[op])}
    if not filled:
        raise ValueError(f"no training data for DER {buckets.der_id}")
    models = {}
    borrowed = []
    for op in LATTICE_PCT:
        src = op if op in filled else _fallback_op(op, filled)
        if src != op:
            borrowed.append(op)
        for ch in Channel:
            models[(ch, op)] = fit(kind, buckets[src].samples(ch), ch, k=k, sections=sections)
    return RegressionModelSet(buckets.der_id, models, version, trained_at, tuple(borrowed))


def retrain(model_set: RegressionModelSet, buckets: BucketSet, learner: str | ModelKind | None = None,
            k: int = 20, sections: int = 100, trained_at: float | None = None) -> RegressionModelSet:
    """Refit from current bucket contents; the version goes up by one.

    Without an explicit learner, each operating point keeps the learner family of
    the old set (NNR stays NNR, anything else is refitted with ``auto`` only if
    the old set was mixed).
    """
    if buckets.der_id != model_set.der_id:
        raise ValueError("bucket set and model set belong to different DERs")
    if learner is None:
        kinds = model_set.kinds()
        learner = kinds.pop() if len(kinds) == 1 else ModelKind.AUTO
    return train_model_set(buckets, learner, k, sections, model_set.version + 1,
                           model_set.trained_at if trained_at is None else trained_at)


# -- JSON ---------------------------------------------------------------------------


def model_set_to_dict(ms: RegressionModelSet) -> dict:
    models = []
    for ch in Channel:
        for op in LATTICE_PCT:
            m = ms.models[(ch, op)]
            models.append({"channel": ch.value, "op_pct": op, "kind": m.kind.value, "payload": m.payload})
    return {"format": MODEL_FORMAT, "der_id": ms.der_id, "version": ms.version,
            "trained_at": ms.trained_at, "borrowed": list(ms.borrowed), "models": models}


def model_set_from_dict(data: dict) -> RegressionModelSet:
    try:
        models = {}
        for m in data["models"]:
            ch = Channel(m["channel"])
            models[(ch, int(m["op_pct"]))] = RegressionModel(ModelKind(m["kind"]), m["payload"], ch)
        return RegressionModelSet(int(data["der_id"]), models, int(data["version"]),
                                  float(data["trained_at"]), tuple(data.get("borrowed", ())))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model file: {exc}") from exc


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model_set(ms: RegressionModelSet, path) -> Path:
    path = Path(path)
    _atomic_write(path, json.dumps(model_set_to_dict(ms), indent=1) + "\n")
    return path


def load_model_set(path) -> RegressionModelSet:
    with Path(path).open() as fh:
        return model_set_from_dict(json.load(fh))


def model_file_name(der_id: int) -> str:
    return f"der_{der_id}.json"


def save_model_sets(sets: dict, directory) -> list[Path]:
    return [save_model_set(ms, Path(directory) / model_file_name(ms.der_id)) for ms in sets.values()]


def load_model_sets(directory) -> dict:
    out = {}
    for p in sorted(Path(directory).glob("der_*.json")):
        ms = load_model_set(p)
        out[ms.der_id] = ms
    if not out:
        raise FileNotFoundError(f"no model files (der_*.json) in {directory}")
    return out


class ModelStore:
    """Holds the live model set of one DER; publishing a new set is an atomic swap."""

    def __init__(self, model_set: RegressionModelSet):
        self._lock = threading.Lock()
        self._current = model_set

    @property
    def current(self) -> RegressionModelSet:
        return self._current

    def publish(self, new: RegressionModelSet) -> None:
        with self._lock:
            if new.der_id != self._current.der_id:
                raise ValueError("cannot publish a model set for another DER")
            if new.version <= self._current.version:
                raise ValueError(f"version {new.version} is not newer than {self._current.version}")
            self._current = new
