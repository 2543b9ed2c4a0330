"""Confusion-matrix segmentation metrics: per-class IoU, mIoU and HmIoU."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IGNORE_LABEL = -1


@dataclass
class ConfusionMatrix:
    seen: tuple[bool, ...]
    counts: np.ndarray = field(default=None)
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        self.seen = tuple(bool(s) for s in self.seen)
        c = len(self.seen)
        if self.counts is None:
            self.counts = np.zeros((c, c), dtype=np.int64)
        elif self.counts.shape != (c, c):
            raise ValueError(f"counts shape {self.counts.shape} does not match {c} classes")

    @property
    def num_classes(self) -> int:
        return len(self.seen)

    def update(self, predictions, labels) -> "ConfusionMatrix":
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if predictions.shape != labels.shape:
            raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
        keep = labels != self.ignore_label
        predictions, labels = predictions[keep], labels[keep]
        c = self.num_classes
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise ValueError("label id out of range")
        if predictions.size and (predictions.min() < 0 or predictions.max() >= c):
            raise ValueError("prediction id out of range")
        self.counts += np.bincount(labels * c + predictions, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.seen != self.seen:
            raise ValueError("cannot merge confusion matrices over different class partitions")
        return ConfusionMatrix(self.seen, self.counts + other.counts, self.ignore_label)


def iou_per_class(conf: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-class IoU and a presence mask (False where TP+FP+FN = 0, IoU then 0)."""
    counts = conf.counts
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    present = denom > 0
    iou = np.zeros(len(tp))
    iou[present] = tp[present] / denom[present]
    return iou, present


def subset_ids(seen: Sequence[bool], subset: str) -> list[int]:
    if subset == "seen":
        return [i for i, s in enumerate(seen) if s]
    if subset == "unseen":
        return [i for i, s in enumerate(seen) if not s]
    if subset == "all":
        return list(range(len(seen)))
    raise ValueError(f"unknown subset {subset!r}")


def miou(conf: ConfusionMatrix, subset: str = "all") -> float:
    """Mean IoU over the subset, skipping classes flagged absent."""
    ids = subset_ids(conf.seen, subset)
    if not ids:
        raise ValueError(f"subset {subset!r} has no classes")
    iou, present = iou_per_class(conf)
    ids = [i for i in ids if present[i]]
    if not ids:
        return 0.0
    return float(np.mean(iou[ids]))


def hmiou(miou_seen: float, miou_unseen: float) -> float:
    if miou_seen < 0 or miou_unseen < 0:
        raise ValueError("mIoU values must be non-negative")
    total = miou_seen + miou_unseen
    if total == 0:
        return 0.0
    return 2.0 * miou_seen * miou_unseen / total


@dataclass
class MetricsReport:
    class_names: tuple[str, ...]
    seen: tuple[bool, ...]
    iou: np.ndarray
    present: np.ndarray
    miou_seen: float
    miou_unseen: float
    miou_all: float
    hmiou: float
    confusion: ConfusionMatrix | None = None

    @classmethod
    def from_confusion(cls, conf: ConfusionMatrix, class_names: Sequence[str]) -> "MetricsReport":
        iou, present = iou_per_class(conf)
        s = miou(conf, "seen") if any(conf.seen) else 0.0
        u = miou(conf, "unseen") if not all(conf.seen) else 0.0
        a = miou(conf, "all") if conf.num_classes else 0.0
        return cls(tuple(class_names), conf.seen, iou, present, s, u, a, hmiou(s, u), conf)


CSV_HEADER = "split,class,iou"


def format_csv(report: MetricsReport) -> str:
    lines = [CSV_HEADER]
    if report.class_names:
        for name, seen, value in zip(report.class_names, report.seen, report.iou):
            lines.append(f"{'seen' if seen else 'unseen'},{name},{value:.6f}")
        for key in ("miou_seen", "miou_unseen", "miou_all", "hmiou"):
            lines.append(f"summary,{key},{getattr(report, key):.6f}")
    return "\n".join(lines) + "\n"


def emit_results(report: MetricsReport, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_csv(report))
    return path
