"""Average precision, mAP, accuracy, and report/CSV output."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .numcore import softmax_rows

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "split", "loss", "accuracy", "map")


def average_precision(scores, positives) -> float:
    """Non-interpolated AP: mean of precision@k over the ranks k of the
    positives. Ties in score keep the original index order."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValidationError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(h / int(r) for h, r in zip(range(1, n_pos + 1), ranks)) / n_pos


def brute_force_ap_oracle(scores, positives) -> float:
    """AP by direct enumeration (no sorting). Test oracle only."""
    scores = list(map(float, scores))
    positives = [bool(p) for p in positives]
    n = len(scores)
    if n > 32:
        raise ValueError("oracle is limited to N <= 32")

    def rank(i):
        return 1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))

    at_rank = {rank(i): i for i in range(n)}
    terms, hits = [], 0
    for k in range(1, n + 1):
        if positives[at_rank[k]]:
            hits += 1
            terms.append(hits / k)
    return math.fsum(terms) / hits


@dataclass
class MetricsReport:
    per_class_ap: list[float]  # NaN where a class has no positives
    map: float
    accuracy: float
    mean_loss: float
    n_samples: int

    def to_dict(self) -> dict:
        ap = [None if math.isnan(a) else a for a in self.per_class_ap]
        return {
            "accuracy": self.accuracy,
            "map": self.map,
            "mean_loss": self.mean_loss,
            "n_samples": self.n_samples,
            "per_class_ap": ap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def map_from_logits(logits, labels, mean_loss: float = float("nan")) -> MetricsReport:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if n < 1:
        raise ValidationError("need at least one sample")
    probs = softmax_rows(logits)
    per_class = []
    for k in range(c):
        pos = labels == k
        if not pos.any():
            log.warning("class %d has no positives; excluded from mAP", k)
            per_class.append(float("nan"))
            continue
        per_class.append(average_precision(probs[:, k], pos))
    valid = [a for a in per_class if not math.isnan(a)]
    mean_ap = float(np.mean(valid)) if valid else float("nan")
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    return MetricsReport(per_class, mean_ap, accuracy, float(mean_loss), n)


def append_metrics_csv(path, epoch: int, split: str, report: MetricsReport) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(CSV_FIELDS)
        w.writerow([epoch, split, repr(report.mean_loss), repr(report.accuracy), repr(report.map)])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
