"""Overlap metrics, threshold sweeps and mean/std/[worst, best] aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CaseScore",
    "MetricSummary",
    "AggregateReport",
    "dsc",
    "jaccard_index",
    "score_case",
    "threshold_sweep",
    "aggregate",
    "DEFAULT_THRESHOLDS",
    "write_scores_csv",
    "write_aggregate_csv",
    "read_scores_csv",
]

DEFAULT_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))


def _masks(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(a, b) -> float:
    """Dice coefficient 2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _masks(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def jaccard_index(a, b) -> float:
    """|A & B| / |A | B|; 1.0 when both masks are empty."""
    a, b = _masks(a, b)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    dsc: float
    ji: float
    threshold: float = 0.5


def score_case(case_id: str, prob, truth, threshold: float = 0.5) -> CaseScore:
    mask = np.asarray(prob) >= threshold
    return CaseScore(case_id, dsc(mask, truth), jaccard_index(mask, truth), threshold)


def threshold_sweep(prob, truth, thresholds: Sequence[float] = DEFAULT_THRESHOLDS, case_id: str = "") -> list[CaseScore]:
    """Binarize ``prob >= t`` at each threshold and score against ``truth``."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("threshold list is empty")
    if any(not 0.0 < t < 1.0 for t in thresholds):
        raise ValueError("thresholds must lie strictly inside (0, 1)")
    if any(t1 <= t0 for t0, t1 in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    prob = np.asarray(prob)
    truth = np.asarray(truth).astype(bool)
    if prob.shape != truth.shape:
        raise ValueError(f"probability map {prob.shape} and truth {truth.shape} differ in shape")
    n_truth = int(truth.sum())
    # sort once so every threshold is a suffix count
    flat = prob.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_p = flat[order]
    sorted_t = truth.ravel()[order]
    tp_suffix = np.concatenate([np.cumsum(sorted_t[::-1])[::-1], [0]])
    out = []
    for t in thresholds:
        start = int(np.searchsorted(sorted_p, t, side="left"))
        n_pred = flat.size - start
        tp = int(tp_suffix[start])
        denom = n_pred + n_truth
        d = 1.0 if denom == 0 else 2.0 * tp / denom
        union = denom - tp
        j = 1.0 if union == 0 else tp / union
        out.append(CaseScore(case_id, d, j, float(t)))
    return out


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    worst: float
    best: float

    def __str__(self) -> str:
        return f"{100 * self.mean:.1f} +/- {100 * self.std:.1f} [{100 * self.worst:.1f}, {100 * self.best:.1f}]"


@dataclass(frozen=True)
class AggregateReport:
    dsc: MetricSummary
    ji: MetricSummary
    count: int

    def rows(self) -> list[tuple[str, MetricSummary]]:
        return [("dsc", self.dsc), ("ji", self.ji)]


def _summary(values: np.ndarray) -> MetricSummary:
    values = np.sort(values)  # order-independent summation
    mean = float(values.mean())
    std = float(np.sqrt(np.mean((values - mean) ** 2)))
    return MetricSummary(mean, std, float(values.min()), float(values.max()))


def aggregate(scores: Iterable[CaseScore]) -> AggregateReport:
    """Mean, population std, worst and best of DSC and JI over cases."""
    scores = list(scores)
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    d = np.array([s.dsc for s in scores], dtype=float)
    j = np.array([s.ji for s in scores], dtype=float)
    return AggregateReport(_summary(d), _summary(j), len(scores))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_scores_csv(scores: Iterable[CaseScore], path=None) -> str:
    """Per-case CSV ``case_id,threshold,dsc,ji``; returns the text and writes it if ``path`` is given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_id", "threshold", "dsc", "ji"])
    for s in scores:
        w.writerow([s.case_id, _fmt(s.threshold), _fmt(s.dsc), _fmt(s.ji)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def write_aggregate_csv(report: AggregateReport, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "mean", "std", "worst", "best"])
    for name, m in report.rows():
        w.writerow([name, _fmt(m.mean), _fmt(m.std), _fmt(m.worst), _fmt(m.best)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_scores_csv(path) -> list[CaseScore]:
    with open(path, newline="") as fh:
        return [
            CaseScore(row["case_id"], float(row["dsc"]), float(row["ji"]), float(row["threshold"]))
            for row in csv.DictReader(fh)
        ]
