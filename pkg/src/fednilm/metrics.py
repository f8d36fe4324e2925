"""Per-appliance classification scoring and experiment-level aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts for one appliance; positive class is ON."""

    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


@dataclass(frozen=True)
class ScoreSet:
    """The four classification metrics plus flags for 0/0 denominators.

    Any metric whose denominator is zero is defined as 0 and its name is
    recorded in `degenerate`.
    """

    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Elementwise confusion counting over aligned binary arrays."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if not np.isin(pred, (0, 1)).all() or not np.isin(truth, (0, 1)).all():
        raise ValueError("confusion inputs must be binary")
    p = pred.astype(bool).ravel()
    t = truth.astype(bool).ravel()
    return ConfusionCounts(
        tp=int((p & t).sum()),
        tn=int((~p & ~t).sum()),
        fp=int((p & ~t).sum()),
        fn=int((~p & t).sum()),
    )


def scores(c: ConfusionCounts) -> ScoreSet:
    """Accuracy, precision, recall and F1 from confusion counts."""
    degenerate = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    accuracy = ratio(c.tp + c.tn, c.total, "accuracy")
    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    if precision + recall == 0.0:
        degenerate.append("f1")
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return ScoreSet(accuracy, precision, recall, f1, tuple(degenerate))


def evaluate_states(pred: np.ndarray, truth: np.ndarray, names: list[str]) -> dict[str, ScoreSet]:
    """Score stacked (n, I, L) or (I, N) state arrays per appliance."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    axis = 1 if pred.ndim == 3 else 0
    if pred.shape[axis] != len(names):
        raise ValueError(f"{pred.shape[axis]} appliance rows for {len(names)} names")
    out = {}
    for i, name in enumerate(names):
        p = pred[:, i] if axis == 1 else pred[i]
        t = truth[:, i] if axis == 1 else truth[i]
        out[name] = scores(confusion(p, t))
    return out


def aggregate_experiment(score_sets: list[ScoreSet]) -> ScoreSet:
    """Metric-level arithmetic mean across runs; degeneracy flags union."""
    if not score_sets:
        raise ValueError("nothing to aggregate")
    n = len(score_sets)
    flags: list[str] = []
    for s in score_sets:
        for name in s.degenerate:
            if name not in flags:
                flags.append(name)
    return ScoreSet(
        accuracy=sum(s.accuracy for s in score_sets) / n,
        precision=sum(s.precision for s in score_sets) / n,
        recall=sum(s.recall for s in score_sets) / n,
        f1=sum(s.f1 for s in score_sets) / n,
        degenerate=tuple(flags),
    )


REPORT_FIELDS = [
    "appliance", "run", "case", "accuracy", "precision", "recall", "f1",
    "tp", "tn", "fp", "fn", "degenerate",
]


def write_score_report(
    path,
    rows: list[tuple[str, str, str, ScoreSet, ConfusionCounts | None]],
    summary: dict[str, ScoreSet] | None = None,
) -> None:
    """CSV report: one row per (appliance, run, case) plus per-appliance summary rows."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for appliance, run, case, s, c in rows:
            writer.writerow(
                [
                    appliance, run, case,
                    f"{s.accuracy:.6f}", f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}",
                    c.tp if c else "", c.tn if c else "", c.fp if c else "", c.fn if c else "",
                    "|".join(s.degenerate),
                ]
            )
        if summary:
            for appliance, s in summary.items():
                writer.writerow(
                    [
                        appliance, "summary", "",
                        f"{s.accuracy:.6f}", f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}",
                        "", "", "", "", "|".join(s.degenerate),
                    ]
                )
