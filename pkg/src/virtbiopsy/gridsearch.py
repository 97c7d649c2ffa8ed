"""Hyperparameter grid runner with per-combination run records.

The grid axes mirror the published search tables (epochs, batch size,
learning rate, optimizer, weight decay, loss settings, scheduler,
architecture knobs, accumulation); any subset may be swept. Every point
of the Cartesian product is evaluated exactly once.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import storage

OBJECTIVES = ("composite_score", "auc")

# axes from the published grids, by model family
KNOWN_AXES = {
    "epochs", "batch_size", "learning_rate", "optimizer", "momentum", "weight_decay",
    "loss", "pos_weight", "focal_alpha", "focal_gamma", "scheduler", "stem_strides",
    "feature_size", "block_config", "accum_steps",
}


@dataclass
class GridSpec:
    """Parameter name -> candidate values, plus the selection objective."""

    axes: dict[str, list]
    objective: str = "composite_score"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.axes:
            raise ValueError("grid must have at least one axis")
        for name, values in self.axes.items():
            if not values:
                raise ValueError(f"axis {name!r} has an empty value list")

    def points(self) -> list[dict]:
        names = sorted(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]


@dataclass
class GridResult:
    best_params: dict
    best_value: float
    runs: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"best_params": self.best_params, "best_value": self.best_value, "runs": self.runs}


def run_grid(spec: GridSpec, evaluate, storage_root=None) -> GridResult:
    """Evaluate every grid point once and pick the best by the objective.

    evaluate(params) must return a dict containing at least the
    objective key. When storage_root is given each point gets its own
    run record under runs/grid-search/.
    """
    runs = []
    best = None
    for params in spec.points():
        t0 = time.monotonic()
        metrics = evaluate(params)
        wall = time.monotonic() - t0
        if spec.objective not in metrics:
            raise ValueError(f"evaluate() did not report objective {spec.objective!r}")
        value = float(metrics[spec.objective])
        entry = {"params": params, "metrics": metrics, "wall_time_seconds": wall}
        if storage_root is not None:
            run_dir = storage.new_run_dir(storage_root, "grid-search", params)
            storage.write_run_record(run_dir, "grid-search", params, outputs=metrics, wall_time=wall)
            entry["run_dir"] = str(run_dir)
        runs.append(entry)
        if best is None or value > best[0]:
            best = (value, params)
    result = GridResult(best_params=best[1], best_value=best[0], runs=runs)
    if storage_root is not None:
        out = Path(storage_root) / "runs" / "grid-search" / "summary.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result.to_json(), indent=2))
    return result
