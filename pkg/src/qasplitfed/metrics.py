"""Segmentation metrics: pixel accuracy, per-class Jaccard index, test-set report."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .dataset import CLASS_NAMES, FOREGROUND, SegSample, stack
from .errors import DataError
from .params import ParamVector


def _pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def pixel_accuracy(pred, gt) -> float:
    """Fraction of pixels whose predicted class equals the ground truth."""
    pred, gt = _pair(pred, gt)
    if pred.size == 0:
        raise DataError("empty masks")
    return float(np.count_nonzero(pred == gt)) / pred.size


def jaccard(pred, gt, cls: int) -> float | None:
    """Intersection over union for one class; ``None`` when the union is empty."""
    pred, gt = _pair(pred, gt)
    p, g = pred == cls, gt == cls
    union = np.count_nonzero(p | g)
    if union == 0:
        return None
    return np.count_nonzero(p & g) / union


@dataclass
class Report:
    loss: float
    accuracy: float
    jaccard: dict[str, float | None] = field(default_factory=dict)

    def as_row(self) -> dict[str, float | None]:
        return {"loss": self.loss, "acc": self.accuracy, **self.jaccard}


def evaluate_global(network: nn.Network, params: ParamVector, test: Sequence[SegSample]) -> Report:
    """Cross-entropy, pixel accuracy and per-class Jaccard, averaged over samples.

    The test set runs as one batch. A class whose Jaccard is undefined on a
    sample (absent from prediction and truth) does not enter that class mean.
    """
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty test set")
    images, masks = stack(test)
    logits, _ = nn.forward(network, params, images)
    losses = nn.per_sample_losses(logits, masks)
    preds = nn.predict(logits)
    acc = [pixel_accuracy(p, m) for p, m in zip(preds, masks)]
    per_class = {}
    for c in FOREGROUND:
        vals = [j for j in (jaccard(p, m, c) for p, m in zip(preds, masks)) if j is not None]
        per_class[CLASS_NAMES[c]] = math.fsum(vals) / len(vals) if vals else None
    return Report(math.fsum(losses) / len(losses), math.fsum(acc) / len(acc), per_class)


TABLE_COLUMNS = ("strategy", "k", "loss", "acc") + tuple(CLASS_NAMES[c] for c in FOREGROUND)


def _fmt(v) -> str:
    return "NA" if v is None else repr(float(v))


def report_rows(strategy: str, k: int, report: Report) -> list[tuple[str, int, str, str]]:
    """Long format: one ``(strategy, k, metric, value)`` row per metric."""
    return [(strategy, k, metric, _fmt(v)) for metric, v in report.as_row().items()]


def write_long_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("strategy", "k", "metric", "value"))
        w.writerows(rows)


def write_table_csv(path, results: Sequence[tuple[str, int, Report]]) -> None:
    """Wide format matching the corruption-sweep table: strategy, k, loss, acc, ZP..BL."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for strategy, k, rep in results:
            row = rep.as_row()
            w.writerow([strategy, k] + [_fmt(row[c]) for c in TABLE_COLUMNS[2:]])


def read_table_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["k"] = int(r["k"])
        for c in TABLE_COLUMNS[2:]:
            r[c] = None if r[c] == "NA" else float(r[c])
    return rows
