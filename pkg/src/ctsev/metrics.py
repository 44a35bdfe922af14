"""Ranking metrics for the two prediction targets.

roc_auc is the Mann-Whitney statistic with half credit for ties, computed in
O(n log n) via midranks. Severity is scored among COVID-positive subjects by
default, matching how the severity target is defined; a flag widens it to
all subjects.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .volume_io import LabeledCase, read_labels_file


class DegenerateLabels(ValueError):
    """AUC is undefined: all labels belong to one class."""


class MissingPrediction(ValueError):
    """A labeled subject has no corresponding prediction."""


@dataclass(frozen=True)
class ScoredCase:
    subject_id: str
    score: float
    label: int


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with tied groups sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(cases: Sequence[ScoredCase]) -> float:
    """P(score_pos > score_neg) + 0.5 * P(score_pos == score_neg)."""
    scores = np.array([c.score for c in cases], dtype=np.float64)
    labels = np.array([c.label for c in cases], dtype=np.int64)
    if scores.size and not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positive / {n_neg} negative")
    ranks = _midranks(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate(
    predictions: Iterable,
    labels: Sequence[LabeledCase],
    severity_among_positives: bool = True,
) -> tuple[float, float]:
    """(AUC severity, AUC covid) for predictions against ground truth.

    `predictions` is any iterable of objects with subject_id / prob_severe /
    prob_covid attributes. Every labeled subject must be predicted; extra
    predictions are ignored.
    """
    by_id = {p.subject_id: p for p in predictions}
    severity_cases: list[ScoredCase] = []
    covid_cases: list[ScoredCase] = []
    for case in labels:
        pred = by_id.get(case.subject_id)
        if pred is None:
            raise MissingPrediction(case.subject_id)
        covid_cases.append(ScoredCase(case.subject_id, pred.prob_covid, case.covid_positive))
        if case.covid_positive or not severity_among_positives:
            severity_cases.append(ScoredCase(case.subject_id, pred.prob_severe, case.severe))
    return roc_auc(severity_cases), roc_auc(covid_cases)


def evaluate_files(
    predictions_path: str | Path,
    labels_path: str | Path,
    severity_among_positives: bool = True,
) -> tuple[float, float]:
    from .ensemble import read_predictions_file

    return evaluate(
        read_predictions_file(predictions_path),
        read_labels_file(labels_path),
        severity_among_positives=severity_among_positives,
    )
