"""Overlap metrics from voxel confusion counts.

Undefined ratios (0/0) are reported as NaN and skipped, with a count, when
averaging over a dataset.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .volgrid import BinaryMask

METRIC_NAMES = ("precision", "recall", "f1", "iou", "dice", "specificity")
UNDEFINED = float("nan")


class DimMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if int(v) != v or v < 0:
                raise ValueError(f"{f.name} must be a non-negative integer, got {v}")
            object.__setattr__(self, f.name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def is_undefined(x: float) -> bool:
    return isinstance(x, float) and math.isnan(x)


def _ratio(num, den) -> float:
    return num / den if den else UNDEFINED


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    f1: float
    iou: float
    dice: float
    specificity: float

    def to_dict(self) -> dict:
        # JSON has no NaN; undefined becomes null
        return {k: (None if is_undefined(v) else v) for k, v in asdict(self).items()}


def _voxels(m):
    return (m.voxels if isinstance(m, BinaryMask) else np.asarray(m)).astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _voxels(pred), _voxels(gt)
    if p.shape != g.shape:
        raise DimMismatch(f"prediction dims {p.shape} != ground truth dims {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g)) - tp
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def report(c: ConfusionCounts) -> MetricReport:
    tp, fp, fn, tn = c.tp, c.fp, c.fn, c.tn
    return MetricReport(
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        f1=_ratio(tp, tp + 0.5 * (fp + fn)),
        iou=_ratio(tp, tp + fp + fn),
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        specificity=_ratio(tn, tn + fp),
    )


def evaluate_case(pred_l, pred_r, gt_l, gt_r) -> dict:
    """Per-side reports plus ``overall`` from the pooled counts of both sides."""
    cl, cr = confusion(pred_l, gt_l), confusion(pred_r, gt_r)
    if cl.total != cr.total:
        raise DimMismatch("left and right grids differ in size")
    return {
        "left": report(cl),
        "right": report(cr),
        "overall": report(cl + cr),
        "counts": {"left": asdict(cl), "right": asdict(cr)},
    }


@dataclass
class Aggregate:
    mean: dict
    excluded: dict
    n_cases: int

    def to_dict(self) -> dict:
        mean = {k: (None if is_undefined(v) else v) for k, v in self.mean.items()}
        return {"mean": mean, "excluded": dict(self.excluded), "n_cases": self.n_cases}


def evaluate_dataset(reports) -> Aggregate:
    """Macro mean over cases of each defined metric.

    ``reports`` holds MetricReport objects (one per case).
    """
    reports = list(reports)
    if not reports:
        raise EmptyDataset("no cases to aggregate")
    mean, excluded = {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports]
        defined = [v for v in vals if not is_undefined(v)]
        excluded[name] = len(vals) - len(defined)
        mean[name] = float(np.mean(defined)) if defined else UNDEFINED
    return Aggregate(mean=mean, excluded=excluded, n_cases=len(reports))
