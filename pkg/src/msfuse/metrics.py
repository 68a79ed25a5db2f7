"""Dice overlap metrics and the evaluation report (per case, class-wise, aggregated)."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateWarning, DimensionError

CLASSES = {1: "GTVp", 2: "GTVn"}


def _counts(pred: np.ndarray, gt: np.ndarray, class_id: int) -> tuple[int, int, int]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p, g = pred == class_id, gt == class_id
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def dsc_case(pred_mask, gt_mask, class_id: int) -> float:
    """2|P&G| / (|P|+|G|) for one label; 1.0 when both are empty."""
    inter, np_, ng = _counts(pred_mask, gt_mask, class_id)
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def dsc_aggregated(cases: Sequence[tuple], class_id: int) -> float:
    """Dice with intersections and sizes pooled over all cases before the ratio."""
    if not cases:
        raise ValueError("dsc_aggregated needs at least one case")
    inter = total = 0
    for pred, gt in cases:
        i, p, g = _counts(pred, gt, class_id)
        inter += i
        total += p + g
    if total == 0:
        warnings.warn(f"class {class_id} is empty in every case; aggregated DSC set to 1.0",
                      DegenerateWarning, stacklevel=2)
        return 1.0
    return 2.0 * inter / total


@dataclass
class EvalReport:
    per_case: dict = field(default_factory=dict)  # case_id -> {class name: dsc}
    classwise: dict = field(default_factory=dict)  # class name -> aggregated dsc
    mean_aggregated: float = 0.0  # mean of the class-wise aggregated values
    pooled: float = 0.0  # one ratio pooled over both classes and all cases

    def to_dict(self) -> dict:
        return {"per_case": self.per_case, "classwise": self.classwise,
                "mean_aggregated": self.mean_aggregated, "pooled": self.pooled}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "class", "dsc"])
        for case_id in sorted(self.per_case):
            for name, value in self.per_case[case_id].items():
                w.writerow([case_id, name, repr(float(value))])
        return buf.getvalue()

    def write(self, json_path, csv_path) -> None:
        Path(json_path).write_text(self.to_json())
        Path(csv_path).write_text(self.to_csv())


def evaluate(cases: Mapping[str, tuple]) -> EvalReport:
    """Build a report from ``{case_id: (pred_mask, gt_mask)}``."""
    if not cases:
        raise ValueError("evaluate needs at least one case")
    pairs = [cases[k] for k in sorted(cases)]
    per_case = {k: {name: dsc_case(*cases[k], cid) for cid, name in CLASSES.items()} for k in sorted(cases)}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        classwise = {name: dsc_aggregated(pairs, cid) for cid, name in CLASSES.items()}
    inter = total = 0
    for pred, gt in pairs:
        for cid in CLASSES:
            i, p, g = _counts(pred, gt, cid)
            inter += i
            total += p + g
    pooled = 1.0 if total == 0 else 2.0 * inter / total
    return EvalReport(per_case, classwise, float(np.mean(list(classwise.values()))), pooled)


def mean_aggregated_dsc(cases: Sequence[tuple]) -> float:
    """Model-selection score: mean over GTVp and GTVn of the aggregated DSC."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        return float(np.mean([dsc_aggregated(cases, cid) for cid in CLASSES]))
