"""Lifelong-learning metrics over a lower-triangular score matrix.

S[t][tau] is accuracy on task tau measured right after training task t
(1-based positions in the training sequence, tau <= t). Average accuracy
looks at the latest row; forgetting compares each earlier task's best past
score against its current one; learning accuracy reads the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScoreMatrix:
    """Grows one row per trained task; row t holds t entries in [0, 1]."""

    def __init__(self, rows: list[list[float]] | None = None):
        self._rows: list[list[float]] = []
        for row in rows or []:
            self.append_row(row)

    def append_row(self, row) -> None:
        row = [float(v) for v in row]
        if len(row) != len(self._rows) + 1:
            raise ValueError(f"row {len(self._rows) + 1} must have {len(self._rows) + 1} entries, got {len(row)}")
        if any(not (0.0 <= v <= 1.0) for v in row):
            raise ValueError("scores must lie in [0, 1]")
        self._rows.append(row)

    @property
    def num_tasks(self) -> int:
        return len(self._rows)

    def score(self, t: int, tau: int) -> float:
        """Accuracy on task tau after training task t; both 1-based, tau <= t."""
        if not (1 <= tau <= t <= self.num_tasks):
            raise IndexError(f"score({t}, {tau}) outside the recorded triangle")
        return self._rows[t - 1][tau - 1]

    def rows(self) -> list[list[float]]:
        return [list(r) for r in self._rows]

    def __eq__(self, other) -> bool:
        return isinstance(other, ScoreMatrix) and self._rows == other._rows


def average_accuracy(scores: ScoreMatrix, t: int) -> float:
    """Mean accuracy over tasks 1..t measured after training task t."""
    if not (1 <= t <= scores.num_tasks):
        raise IndexError(f"no row recorded for t={t}")
    # plain left-to-right accumulation: keeps the value reproducible by any
    # naive re-evaluation of the definition (pairwise summation would not be)
    total = 0.0
    for tau in range(1, t + 1):
        total += scores.score(t, tau)
    return total / t


def forgetting(scores: ScoreMatrix, t: int) -> float:
    """Mean over earlier tasks of (best past score - current score).

    The best past score for task tau is the max of S[tau'][tau] over the
    recorded entries tau' in {tau, ..., t-1}. Defined for t >= 2.
    """
    if t < 2:
        raise ValueError("forgetting needs at least two trained tasks")
    if t > scores.num_tasks:
        raise IndexError(f"no row recorded for t={t}")
    total = 0.0
    for tau in range(1, t):
        best = max(scores.score(tp, tau) for tp in range(tau, t))
        total += best - scores.score(t, tau)
    return total / (t - 1)


def learning_accuracy(scores: ScoreMatrix, t: int) -> float:
    """Mean diagonal accuracy: each task measured right after it was trained."""
    if not (1 <= t <= scores.num_tasks):
        raise IndexError(f"no row recorded for t={t}")
    total = 0.0
    for tau in range(1, t + 1):
        total += scores.score(tau, tau)
    return total / t


@dataclass
class SequenceMetrics:
    """Per-sequence metric trajectories; forgetting starts at t=2."""

    average_accuracy: list[float]
    forgetting: list[float]
    learning_accuracy: list[float]

    @property
    def num_tasks(self) -> int:
        return len(self.average_accuracy)


def compute_metrics(scores: ScoreMatrix) -> SequenceMetrics:
    T = scores.num_tasks
    return SequenceMetrics(
        average_accuracy=[average_accuracy(scores, t) for t in range(1, T + 1)],
        forgetting=[forgetting(scores, t) for t in range(2, T + 1)],
        learning_accuracy=[learning_accuracy(scores, t) for t in range(1, T + 1)],
    )


@dataclass
class MetricsReport:
    """Mean and sample std of each metric across sequences, plus final-task scalars."""

    num_sequences: int
    num_tasks: int
    accuracy_mean: list[float]
    accuracy_std: list[float]
    forgetting_mean: list[float]
    forgetting_std: list[float]
    learning_accuracy_mean: list[float]
    learning_accuracy_std: list[float]

    @property
    def final(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy_mean[-1],
            "accuracy_std": self.accuracy_std[-1],
            "forgetting": self.forgetting_mean[-1] if self.forgetting_mean else 0.0,
            "forgetting_std": self.forgetting_std[-1] if self.forgetting_std else 0.0,
            "learning_accuracy": self.learning_accuracy_mean[-1],
            "learning_accuracy_std": self.learning_accuracy_std[-1],
        }

    def to_dict(self) -> dict:
        return {
            "num_sequences": self.num_sequences,
            "num_tasks": self.num_tasks,
            "accuracy_mean": self.accuracy_mean,
            "accuracy_std": self.accuracy_std,
            "forgetting_mean": self.forgetting_mean,
            "forgetting_std": self.forgetting_std,
            "learning_accuracy_mean": self.learning_accuracy_mean,
            "learning_accuracy_std": self.learning_accuracy_std,
        }


def _mean_std(columns: np.ndarray) -> tuple[list[float], list[float]]:
    mean = columns.mean(axis=0)
    # sample std; a single sequence reports zero spread rather than NaN
    std = columns.std(axis=0, ddof=1) if columns.shape[0] > 1 else np.zeros(columns.shape[1])
    return [float(v) for v in mean], [float(v) for v in std]


def aggregate(reports: list[SequenceMetrics]) -> MetricsReport:
    """Combine per-sequence metrics; all inputs must cover the same task count."""
    if not reports:
        raise ValueError("need at least one sequence report")
    T = reports[0].num_tasks
    if any(r.num_tasks != T for r in reports):
        raise ValueError("sequence reports disagree on task count")
    acc = np.asarray([r.average_accuracy for r in reports], dtype=np.float64)
    la = np.asarray([r.learning_accuracy for r in reports], dtype=np.float64)
    acc_m, acc_s = _mean_std(acc)
    la_m, la_s = _mean_std(la)
    if T >= 2:
        fg = np.asarray([r.forgetting for r in reports], dtype=np.float64)
        fg_m, fg_s = _mean_std(fg)
    else:
        fg_m, fg_s = [], []
    return MetricsReport(
        num_sequences=len(reports),
        num_tasks=T,
        accuracy_mean=acc_m,
        accuracy_std=acc_s,
        forgetting_mean=fg_m,
        forgetting_std=fg_s,
        learning_accuracy_mean=la_m,
        learning_accuracy_std=la_s,
    )
