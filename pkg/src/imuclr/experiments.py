"""Experiment grids: loss-term ablations and aligned-fraction sweeps.

Each grid point gets a fresh seeded init, a full pretraining run, and a
few-shot evaluation with trial seeds shared across points so comparisons
are paired. Results go to CSV or JSON with a stable column order.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .data import TripletDataset, strip_alignment
from .errors import ConfigError, DataError
from .evaluation import (
    CollapseDiagnostic,
    ProbeConfig,
    ProbeReport,
    collapse_diagnostic,
    extract_features,
    few_shot_eval,
)
from .losses import LossConfig
from .seeding import make_rng
from .training import TrainConfig, pretrain

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("task", "objective", "aligned_fraction", "n_per_class",
                  "trial", "accuracy", "mean", "stderr")


@dataclass(frozen=True)
class GridPoint:
    """One pretraining objective: loss weights plus an aligned-data fraction."""

    name: str
    alpha: float
    beta: float
    gamma: float
    aligned_fraction: float = 1.0

    def key(self) -> tuple:
        return (self.alpha, self.beta, self.gamma, self.aligned_fraction)


@dataclass
class ExperimentGrid:
    points: list[GridPoint]
    shots: list[int] = field(default_factory=lambda: [10, 50, 100])
    trials: int = 5

    def __post_init__(self):
        if not self.points:
            raise ConfigError("experiment grid must contain at least one point")
        keys = [p.key() for p in self.points]
        if len(set(keys)) != len(keys):
            raise ConfigError("experiment grid points must be distinct")


# Named presets. `fig4` sweeps the loss-term combinations (the full
# three-term objective last); `fig5` sweeps the aligned-data fraction with
# all terms on.
PRESETS: dict[str, list[GridPoint]] = {
    "fig4": [
        GridPoint("ss", 1, 0, 0),
        GridPoint("mm", 0, 1, 0),
        GridPoint("ss+mm", 1, 1, 0),
        GridPoint("ss+nn", 1, 0, 1),
        GridPoint("mm+nn", 0, 1, 1),
        GridPoint("ss+mm+nn", 1, 1, 1),
    ],
    "fig5": [
        GridPoint("ss+mm+nn@0.01", 1, 1, 1, aligned_fraction=0.01),
        GridPoint("ss+mm+nn@0.1", 1, 1, 1, aligned_fraction=0.1),
        GridPoint("ss+mm+nn@0.5", 1, 1, 1, aligned_fraction=0.5),
        GridPoint("ss+mm+nn@1.0", 1, 1, 1, aligned_fraction=1.0),
    ],
}


def preset_grid(name: str, shots: list[int] | None = None, trials: int = 5) -> ExperimentGrid:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}'; available: {sorted(PRESETS)}")
    return ExperimentGrid(points=list(PRESETS[name]),
                          shots=shots or [10, 50, 100], trials=trials)


def grid_from_json(path: str, trials: int = 5) -> ExperimentGrid:
    raw = json.loads(Path(path).read_text())
    points = [GridPoint(**p) for p in raw["points"]]
    return ExperimentGrid(points=points, shots=raw.get("shots", [10, 50, 100]),
                          trials=raw.get("trials", trials))


@dataclass
class RunOutcome:
    point: GridPoint
    reports: list[ProbeReport]
    diagnostic: CollapseDiagnostic | None
    error: str | None = None


def _point_config(base: TrainConfig, point: GridPoint) -> TrainConfig:
    loss = LossConfig(alpha=point.alpha, beta=point.beta, gamma=point.gamma,
                      tau_init=base.loss.tau_init, per_term_tau=base.loss.per_term_tau)
    return dataclasses.replace(base, loss=loss)


def _run_point(ds: TripletDataset, grid: ExperimentGrid, base_cfg: TrainConfig,
               eval_seed: int, point: GridPoint) -> RunOutcome:
    try:
        run_ds = ds
        if point.aligned_fraction < 1.0:
            run_ds = strip_alignment(
                ds, point.aligned_fraction,
                make_rng(base_cfg.seed, "strip", point.name),
            )
        cfg = _point_config(base_cfg, point)
        result = pretrain(run_ds, cfg)
        reports = few_shot_eval(
            result.params, run_ds, grid.shots, trials=grid.trials,
            base_seed=eval_seed, task="few-shot",
            objective=point.name, aligned_fraction=point.aligned_fraction,
        )
        features, _ = extract_features(result.params, run_ds,
                                       indices=run_ds.test_indices)
        top_shot = max(r.n_per_class for r in reports)
        top_report = next(r for r in reports if r.n_per_class == top_shot)
        diag = collapse_diagnostic(features, top_report.mean, run_ds.n_classes)
        return RunOutcome(point, reports, diag)
    except Exception as exc:  # keep the grid going; the row records the failure
        logger.warning("grid point %s failed: %s", point.name, exc)
        return RunOutcome(point, [], None, error=str(exc))


def run_ablation(ds: TripletDataset, grid: ExperimentGrid, base_cfg: TrainConfig,
                 probe_cfg: ProbeConfig = ProbeConfig(),
                 eval_seed: int = 0, workers: int = 1) -> list[RunOutcome]:
    """Pretrain and evaluate every grid point; per-point failures are
    recorded and the grid continues. Points are independent, so
    `workers > 1` fans them out over processes (results identical to the
    serial run; each point is seeded on its own)."""
    if workers <= 1 or len(grid.points) == 1:
        return [_run_point(ds, grid, base_cfg, eval_seed, p) for p in grid.points]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_point, ds, grid, base_cfg, eval_seed, p)
                   for p in grid.points]
        return [f.result() for f in futures]


def result_rows(reports: list[ProbeReport]) -> list[dict]:
    """Flatten reports into per-trial rows plus one summary row per
    (objective, n_per_class)."""
    rows: list[dict] = []
    for rep in reports:
        for trial, acc in enumerate(rep.accuracies):
            rows.append({
                "task": rep.task, "objective": rep.objective,
                "aligned_fraction": rep.aligned_fraction,
                "n_per_class": rep.n_per_class, "trial": trial,
                "accuracy": acc, "mean": "", "stderr": "",
            })
        rows.append({
            "task": rep.task, "objective": rep.objective,
            "aligned_fraction": rep.aligned_fraction,
            "n_per_class": rep.n_per_class, "trial": "",
            "accuracy": "", "mean": rep.mean, "stderr": rep.stderr,
        })
    return rows


def emit_results(reports: list[ProbeReport], path: str, fmt: str = "csv") -> None:
    """Write reports with the stable column order; numbers use shortest
    round-trip decimals (plain repr)."""
    if not reports:
        raise DataError("no reports to emit")
    rows = result_rows(reports)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(out, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})
    elif fmt == "json":
        out.write_text(json.dumps(rows, indent=2))
    else:
        raise ConfigError(f"unknown results format '{fmt}' (use csv or json)")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_results_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
