"""Segmentation, planning, tracking and inspection metrics plus the run report model."""

from __future__ import annotations

from collections.abc import Sequence
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linear_sum_assignment

from .facility import is_column, is_wall
from .perception import StructureInstance, StructureKind


class MatchCounts(NamedTuple):
    true_positives: int
    false_positives: int
    false_negatives: int

    @property
    def precision(self) -> float:
        found = self.true_positives + self.false_positives
        return self.true_positives / found if found else 0.0

    @property
    def recall(self) -> float:
        truth = self.true_positives + self.false_negatives
        return self.true_positives / truth if truth else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def match_centers(predicted: np.ndarray, truth: np.ndarray, max_distance: float) -> MatchCounts:
    """One-to-one assignment of predicted to true centres, accepting pairs closer than ``max_distance``."""
    pred = np.asarray(predicted, dtype=float).reshape(-1, 2)
    true = np.asarray(truth, dtype=float).reshape(-1, 2)
    if not len(pred) or not len(true):
        return MatchCounts(0, len(pred), len(true))
    cost = np.linalg.norm(pred[:, None, :] - true[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    tp = int(np.sum(cost[rows, cols] < max_distance))
    return MatchCounts(tp, len(pred) - tp, len(true) - tp)


def truth_column_centers(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels[is_column(labels)])
    if not ids.size:
        return np.zeros((0, 2))
    return np.array([points[labels == i, :2].mean(axis=0) for i in ids])


def eval_f1(predicted: Sequence[StructureInstance], points: np.ndarray, labels: np.ndarray, spacing: float) -> MatchCounts:
    """Column detection counts; a detection matches a true column within half the column spacing."""
    centers = np.array([inst.column.center for inst in predicted if inst.kind is StructureKind.COLUMN and inst.column is not None])
    return match_centers(centers.reshape(-1, 2), truth_column_centers(points, labels), spacing / 2.0)


def eval_wall_fraction(walls: Sequence[StructureInstance] | np.ndarray, labels: np.ndarray) -> float:
    """Share of true wall points that ended up in an extracted wall."""
    truth = is_wall(labels)
    total = int(truth.sum())
    if total == 0:
        return 1.0
    if isinstance(walls, np.ndarray):
        extracted = walls.astype(np.int64).ravel()
    else:
        chunks = [w.indices for w in walls if w.kind is StructureKind.WALL]
        extracted = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    hit = np.zeros(len(labels), dtype=bool)
    hit[np.unique(extracted)] = True
    return float(np.sum(hit & truth)) / total


class TrackingStats(NamedTuple):
    ape_max: float
    ape_rmse: float
    rpe_max: float
    rpe_rmse: float


def eval_tracking(times: np.ndarray, reference: np.ndarray, executed: np.ndarray, window: float = 1.0) -> TrackingStats:
    """Absolute error per sample and relative error of the motion over ``window`` seconds."""
    t = np.asarray(times, dtype=float).ravel()
    ref = np.asarray(reference, dtype=float).reshape(-1, 3)
    exe = np.asarray(executed, dtype=float).reshape(-1, 3)
    if not len(t):
        raise ValueError("tracking log is empty")
    if len(ref) != len(t) or len(exe) != len(t):
        raise ValueError("reference, executed and times must be aligned")
    ape = np.linalg.norm(exe - ref, axis=1)
    later = np.searchsorted(t, t + window - 1e-9)
    pairs = later < len(t)
    i = np.nonzero(pairs)[0]
    j = later[pairs]
    rpe = np.linalg.norm((exe[j] - exe[i]) - (ref[j] - ref[i]), axis=1) if i.size else np.zeros(0)
    return TrackingStats(
        float(ape.max()),
        float(np.sqrt(np.mean(ape**2))),
        float(rpe.max()) if rpe.size else 0.0,
        float(np.sqrt(np.mean(rpe**2))) if rpe.size else 0.0,
    )


class PlannerRow(BaseModel):
    scenario: str
    t_g: float = Field(ge=0)
    t_opt: float = Field(ge=0)
    t_astar: float = Field(ge=0)
    distance: float = Field(ge=0)
    length: float = Field(ge=0)
    success: bool

    model_config = ConfigDict(extra="forbid")


class TrackingRow(BaseModel):
    path: str
    speed: float = Field(gt=0)
    ape_max: float = Field(ge=0)
    ape_rmse: float = Field(ge=0)
    rpe_max: float = Field(ge=0)
    rpe_rmse: float = Field(ge=0)

    model_config = ConfigDict(extra="forbid")


class InspectionOutcome(BaseModel):
    instance: str
    kind: str
    success: bool = False
    reachable: bool = True
    explored: bool = False
    alpha_final: float = Field(0.0, ge=0, le=1)
    alpha_history: list[float] = Field(default_factory=list)
    exploration_distance: float = Field(0.0, ge=0)
    scan_length: float = Field(0.0, ge=0)
    captures: int = Field(0, ge=0)
    capture_ratio: float = Field(0.0, ge=0, le=1)
    trimmed: int = Field(0, ge=0)
    violations: int = Field(0, ge=0)
    intrusions: int = Field(0, ge=0)
    tracking_rmse: float = Field(0.0, ge=0)
    message: str = ""

    model_config = ConfigDict(extra="forbid")


class QualityRow(BaseModel):
    file: str
    niqe: float = Field(ge=0)
    niqe_norm: float = Field(ge=0, le=1)
    kept: bool

    model_config = ConfigDict(extra="forbid")


class EvalReport(BaseModel):
    profile: str = ""
    seed: int = 0
    odometry: str = "truth"
    segmentation_f1: float | None = Field(None, ge=0, le=1)
    segmentation_precision: float | None = Field(None, ge=0, le=1)
    segmentation_recall: float | None = Field(None, ge=0, le=1)
    wall_fraction: float | None = Field(None, ge=0, le=1)
    instances: int = Field(0, ge=0)
    planner: list[PlannerRow] = Field(default_factory=list)
    tracking: list[TrackingRow] = Field(default_factory=list)
    inspections: list[InspectionOutcome] = Field(default_factory=list)
    quality: list[QualityRow] = Field(default_factory=list)
    psnr: float | None = None
    localization_rmse: float | None = Field(None, ge=0)
    errors: list[str] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")

    @property
    def inspection_success(self) -> float:
        if not self.inspections:
            return 0.0
        return sum(1 for o in self.inspections if o.success) / len(self.inspections)

    def without_timings(self) -> EvalReport:
        """Copy with the wall-clock fields zeroed, for run-to-run comparison."""
        rows = [r.model_copy(update={"t_g": 0.0, "t_opt": 0.0, "t_astar": 0.0}) for r in self.planner]
        return self.model_copy(update={"planner": rows})


__all__ = [
    "EvalReport",
    "InspectionOutcome",
    "MatchCounts",
    "PlannerRow",
    "QualityRow",
    "TrackingRow",
    "TrackingStats",
    "eval_f1",
    "eval_tracking",
    "eval_wall_fraction",
    "match_centers",
    "truth_column_centers",
]
