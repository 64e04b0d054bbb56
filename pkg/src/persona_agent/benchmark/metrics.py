"""Accuracy / macro-F1 for classification tasks, MAE / RMSE for ratings."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

from persona_agent.core import Label, PersonaAgentError, Prediction, TaskKind

IMPUTED_RATING = 3
F1_AVERAGE = "macro"


class LengthMismatch(PersonaAgentError):
    pass


@dataclass(frozen=True)
class MetricReport:
    task: TaskKind
    n_examples: int
    n_parse_failures: int
    accuracy: float | None = None
    f1: float | None = None
    mae: float | None = None
    rmse: float | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return d


def _norm(label: Label) -> str:
    return str(label).strip().lower()


def macro_f1(preds: Sequence[str | None], gts: Sequence[str], labels: Sequence[str] | None = None) -> float:
    """One-vs-rest F1 averaged over the labels seen in gold or predictions.

    ``labels`` restricts the candidate set; ``None`` predictions (parse
    failures) only count as misses for their gold label.
    """
    present = {g for g in gts} | {p for p in preds if p is not None}
    if labels is not None:
        allowed = set(labels)
        present &= allowed
    if not present:
        return 0.0
    scores = []
    for lab in sorted(present):
        tp = sum(1 for p, g in zip(preds, gts) if p == lab and g == lab)
        fp = sum(1 for p, g in zip(preds, gts) if p == lab and g != lab)
        fn = sum(1 for p, g in zip(preds, gts) if p != lab and g == lab)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return sum(scores) / len(scores)


def compute_metrics(
    predictions: Sequence[Prediction],
    ground_truths: Sequence[Label],
    task: TaskKind,
    label_set: Sequence[str] | None = None,
) -> MetricReport:
    """Score predictions against gold labels.

    Parse failures count as wrong for classification and are imputed as the
    scale midpoint for ratings; ``n_parse_failures`` reports how many.
    """
    if len(predictions) != len(ground_truths):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(ground_truths)} ground truths")
    if not predictions:
        raise ValueError("at least one prediction is required")
    n = len(predictions)
    failures = sum(1 for p in predictions if p.parse_failed or p.label is None)

    if task.is_rating:
        errors = []
        for p, g in zip(predictions, ground_truths):
            guess = IMPUTED_RATING if p.parse_failed or p.label is None else int(p.label)
            errors.append(abs(guess - int(g)))
        mae = sum(errors) / n
        rmse = math.sqrt(sum(e * e for e in errors) / n)
        return MetricReport(task, n, failures, mae=mae, rmse=rmse)

    preds = [None if p.parse_failed or p.label is None else _norm(p.label) for p in predictions]
    gts = [_norm(g) for g in ground_truths]
    accuracy = sum(1 for p, g in zip(preds, gts) if p is not None and p == g) / n
    labels = None if label_set is None else [_norm(lab) for lab in label_set]
    return MetricReport(task, n, failures, accuracy=accuracy, f1=macro_f1(preds, gts, labels))
