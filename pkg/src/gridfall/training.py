"""Offline pipeline: OPF sweep -> training rows -> buckets -> 42 models per DER."""

from __future__ import annotations

from dataclasses import dataclass

from .grid import GridModel
from .opf import CostParams, SweepResult, TrainingRow, run_sweep, training_rows
from .regression import BucketSet, RegressionModelSet, train_model_set


@dataclass
class TrainingOutput:
    sweep: SweepResult
    rows: dict  # der index -> list[TrainingRow]
    buckets: dict  # der index -> BucketSet
    model_sets: dict  # der index -> RegressionModelSet


def buckets_from_sweep(grid: GridModel, sweep: SweepResult, capacity: int = 512) -> tuple[dict, dict]:
    rows, buckets = {}, {}
    for i in grid.controllable:
        rows[i] = training_rows(grid, sweep, i)
        buckets[i] = BucketSet.from_rows(i, rows[i], grid.ders[i].kind, capacity)
    return rows, buckets


def train_from_sweep(grid: GridModel, sweep: SweepResult, learner: str = "nnr", k: int = 20,
                     sections: int = 100, capacity: int = 512) -> TrainingOutput:
    rows, buckets = buckets_from_sweep(grid, sweep, capacity)
    sets = {i: train_model_set(b, learner, k, sections) for i, b in buckets.items()}
    return TrainingOutput(sweep, rows, buckets, sets)


def train(grid: GridModel, params: CostParams, learner: str = "nnr", k: int = 20, sections: int = 100,
          capacity: int = 512, jobs: int = 1, scenarios=None) -> TrainingOutput:
    sweep = run_sweep(grid, params, jobs=jobs, scenarios=scenarios)
    return train_from_sweep(grid, sweep, learner, k, sections, capacity)


__all__ = ["TrainingOutput", "TrainingRow", "RegressionModelSet", "buckets_from_sweep",
           "train_from_sweep", "train"]
