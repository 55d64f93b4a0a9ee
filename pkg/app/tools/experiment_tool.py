"""
Experiment runners for the Type I error, power and drift tables.

Every replication gets its own seed derived from (grid seed, cell, index),
so results do not depend on the worker count or the schedule.
"""
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

import app
from app.errors import InputError
from app.services.permtest import client_level_tests, itd_permutation_test
from app.services.seeding import derive_seed
from app.services.synth import (
    DriftConfig,
    ModelConfig,
    ModelKind,
    client_id_for,
    sample_drift,
    sample_model,
)

logger = logging.getLogger(__name__)

GRIDS_DIR = os.path.join("data", "grids")
TYPE1_BAND = (0.005, 0.105)

# --- Input Schemas ---


class ExperimentCell(BaseModel):
    model: ModelKind = Field(default=ModelKind.A, description="Simulation model A-D.")
    dist: Literal["normal", "lognormal", "t5"] = Field(default="normal", description="Base distribution.")
    K: int = Field(default=5, ge=1, description="Clients per replication.")
    d: int = Field(default=2, ge=1, description="Dimension.")
    m: int = Field(default=100, ge=1)
    n: int = Field(default=100, ge=1)
    shift_sd: float = Field(default=0.25, ge=0, description="Standard deviation of the mean and scale shifts.")
    label: Optional[str] = Field(default=None, description="Row label; defaults to model/dist/K/d.")
    min_rate: Optional[float] = Field(default=None, ge=0, le=1, description="Acceptance floor for the rejection rate.")
    max_rate: Optional[float] = Field(default=None, ge=0, le=1, description="Acceptance ceiling for the rejection rate.")

    def row_label(self):
        return self.label or f"{self.model.value}-{self.dist}-K{self.K}-d{self.d}"

    def model_config_for(self, seed):
        return ModelConfig(model=self.model, dist=self.dist, K=self.K, d=self.d, m=self.m, n=self.n,
                           shift_sd=self.shift_sd, seed=seed)


class ExperimentGrid(BaseModel):
    cells: list[ExperimentCell] = Field(min_length=1)
    alpha: float = Field(default=0.05, gt=0, lt=1)
    replications: int = Field(default=200, ge=1)
    B_k: int = Field(default=50, ge=1, description="Permuted statistics per client.")
    B: int = Field(default=500, ge=1, description="Permuted ITD values at the coordinator.")
    p: float = Field(default=2.0, ge=1)
    weighting: Literal["size", "equal"] = "size"
    solver: Literal["exact", "sinkhorn"] = "exact"
    seed: int = 20240101
    out: Optional[str] = Field(default=None, description="Directory for the CSV and JSON reports.")
    workers: int = Field(default=1, ge=1, description="Worker processes for replications.")
    timings: bool = Field(default=False, description="Record wall time per row (breaks byte-reproducibility).")


class DriftExperiment(BaseModel):
    drift: DriftConfig = Field(default_factory=DriftConfig)
    alpha: float = Field(default=0.05, gt=0, lt=1)
    replications: int = Field(default=200, ge=1)
    B_k: int = Field(default=50, ge=1)
    B: int = Field(default=500, ge=1)
    seed: int = 20240101
    out: Optional[str] = None
    workers: int = Field(default=1, ge=1)
    timings: bool = False


# --- Result tables ---


class ResultRow(BaseModel):
    label: str
    model: str
    dist: str
    K: int
    d: int
    m: int
    n: int
    rejection_rate: float = Field(ge=0, le=1)
    replications: int = Field(ge=1)
    wall_time: Optional[float] = None
    passed: Optional[bool] = None


class ResultTable(BaseModel):
    rows: list[ResultRow]
    metadata: dict[str, str | int | float | bool] = Field(default_factory=dict)

    @property
    def passed(self):
        return all(row.passed is not False for row in self.rows)

    def to_frame(self):
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=list(ResultRow.model_fields))

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path, metadata=None):
        frame = pd.read_csv(path, float_precision="round_trip", dtype={"label": str, "model": str, "dist": str})
        rows = []
        for record in frame.to_dict(orient="records"):
            record = {k: v.item() if isinstance(v, np.generic) else v for k, v in record.items()}
            for key in ("wall_time", "passed"):
                if isinstance(record[key], float) and math.isnan(record[key]):
                    record[key] = None
            rows.append(ResultRow.model_validate(record))
        return cls(rows=rows, metadata=metadata or {})

    def to_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2) + "\n")
        return path

    @classmethod
    def from_json(cls, path):
        return cls.model_validate_json(Path(path).read_text())

    def render(self):
        frame = self.to_frame()
        if frame["wall_time"].isna().all():
            frame = frame.drop(columns=["wall_time"])
        if frame["passed"].isna().all():
            frame = frame.drop(columns=["passed"])
        return frame.to_string(index=False, float_format=lambda x: f"{x:.3f}")


def load_grid(path):
    """
    Reads an ExperimentGrid from JSON. Bare file names are looked up in
    data/grids/ first.
    """
    path = str(path)
    if not os.path.isabs(path) and not os.path.exists(path):
        candidate = os.path.join(GRIDS_DIR, path)
        if not candidate.endswith(".json") and os.path.exists(candidate + ".json"):
            candidate += ".json"
        path = candidate
    if not os.path.exists(path):
        raise FileNotFoundError(f"Grid file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"Invalid JSON in {path}: {e}")
    return ExperimentGrid.model_validate(data)


# --- Replication workers (top level so they pickle) ---


def _grid_replication(job):
    cell, rep_seed, grid = job
    clients = sample_model(cell.model_config_for(derive_seed(rep_seed, "data")))
    report = itd_permutation_test(clients, alpha=grid.alpha, B_k=grid.B_k, B=grid.B,
                                  seed=derive_seed(rep_seed, "test"), p=grid.p, solver=grid.solver,
                                  weighting=grid.weighting)
    return report.reject


def _drift_replication(job):
    exp, rep_seed = job
    clients = sample_drift(exp.drift.model_copy(update={"seed": derive_seed(rep_seed, "data")}))
    test_seed = derive_seed(rep_seed, "test")
    report, batches = itd_permutation_test(clients, alpha=exp.alpha, B_k=exp.B_k, B=exp.B, seed=test_seed,
                                           keep_batches=True)
    per_client = client_level_tests(report, batches, exp.alpha, exp.B, test_seed)
    return [r.reject for r in per_client] + [report.reject]


def run_replications(fn, jobs, workers=1):
    """Maps fn over jobs, in order, on up to `workers` processes."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _metadata(kind, seed, **extra):
    return {"experiment": kind, "seed": seed, "version": app.__version__, **extra}


def _run_grid(grid, kind, default_band=None):
    rows = []
    for index, cell in enumerate(grid.cells):
        start = time.perf_counter()
        jobs = [(cell, derive_seed(grid.seed, "cell", index, "rep", r), grid) for r in range(grid.replications)]
        rejects = run_replications(_grid_replication, jobs, grid.workers)
        rate = float(np.mean(rejects))
        low, high = cell.min_rate, cell.max_rate
        if low is None and high is None and default_band is not None:
            low, high = default_band
        passed = None
        if low is not None or high is not None:
            passed = (low is None or rate >= low) and (high is None or rate <= high)
        rows.append(ResultRow(
            label=cell.row_label(), model=cell.model.value, dist=cell.dist, K=cell.K, d=cell.d,
            m=cell.m, n=cell.n, rejection_rate=rate, replications=grid.replications,
            wall_time=round(time.perf_counter() - start, 3) if grid.timings else None,
            passed=passed,
        ))
        logger.info("%s: rejection rate %.3f over %d replications", cell.row_label(), rate, grid.replications)
    return ResultTable(rows=rows, metadata=_metadata(kind, grid.seed, alpha=grid.alpha, B_k=grid.B_k, B=grid.B,
                                                     weighting=grid.weighting, solver=grid.solver))


def run_type1(grid):
    """Rejection frequency under Model A; cells without bounds are gated on the 200-rep band around 0.05."""
    wrong = [c.row_label() for c in grid.cells if c.model != ModelKind.A]
    if wrong:
        raise InputError(f"Type I error runs need Model A cells, got {wrong}")
    return _run_grid(grid, "type1", TYPE1_BAND)


def run_power(grid):
    """Rejection frequency under Models B-D."""
    wrong = [c.row_label() for c in grid.cells if c.model == ModelKind.A]
    if wrong:
        raise InputError(f"Power runs need Model B, C or D cells, got {wrong}")
    return _run_grid(grid, "power")


def run_drift(exp):
    """
    Per-client power and ITD power on the mixture-drift data, one row per
    client plus a final "ITD" row. With drift present (epsilon < 1) the ITD
    row passes when its power is at least the best client's.
    """
    cfg = exp.drift
    start = time.perf_counter()
    jobs = [(exp, derive_seed(exp.seed, "drift", "rep", r)) for r in range(exp.replications)]
    rejects = np.asarray(run_replications(_drift_replication, jobs, exp.workers), dtype=float)
    rates = rejects.mean(axis=0)
    wall_time = round(time.perf_counter() - start, 3) if exp.timings else None
    labels = [client_id_for(k) for k in range(cfg.K)] + ["ITD"]
    rows = []
    for label, rate in zip(labels, rates):
        passed = None
        if label == "ITD" and cfg.epsilon < 1:
            passed = bool(rate >= rates[:-1].max())
        rows.append(ResultRow(
            label=label, model="drift", dist="normal", K=cfg.K if label == "ITD" else 1, d=cfg.d,
            m=cfg.m, n=cfg.m, rejection_rate=float(rate), replications=exp.replications,
            wall_time=wall_time, passed=passed,
        ))
    logger.info("Drift epsilon=%.2f: ITD power %.3f, best client %.3f", cfg.epsilon, rates[-1], rates[:-1].max())
    return ResultTable(rows=rows, metadata=_metadata("drift", exp.seed, alpha=exp.alpha, B_k=exp.B_k, B=exp.B,
                                                     epsilon=cfg.epsilon))
