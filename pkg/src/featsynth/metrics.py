"""Confusion-matrix accumulation and the four segmentation measures.

Rows of the confusion matrix index ground-truth class, columns predicted
class. Classes with zero ground-truth pixels are excluded from the ClassAcc
and mIoU means rather than scored as 0.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import IGNORE_LABEL


class ConfusionMatrix:
    """K x K count matrix; pixels with ignore-label ground truth are skipped."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes):
                raise ValueError(f"counts shape {counts.shape} != ({num_classes}, {num_classes})")
            if (counts < 0).any():
                raise ValueError("confusion counts must be non-negative")
            self.counts = counts.copy()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        """Add one (pred, gt) mask pair; returns self for chaining."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        valid = gt != IGNORE_LABEL
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        if p.size == 0:
            return self
        k = self.num_classes
        if (p < 0).any() or (p >= k).any():
            raise ValueError("prediction contains out-of-range class ids")
        if (g < 0).any() or (g >= k).any():
            raise ValueError("ground truth contains out-of-range class ids")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Entrywise sum, for parallel evaluation with a final reduce."""
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self


@dataclass
class MetricBundle:
    """PixelAcc / ClassAcc / mIoU / fwIoU plus per-class vectors.

    Per-class entries are None for classes absent from the ground truth.
    """

    pixel_acc: float
    class_acc: float
    miou: float
    fwiou: float
    per_class_acc: list
    per_class_iou: list

    def to_dict(self) -> dict:
        return {
            "pixel_acc": self.pixel_acc,
            "class_acc": self.class_acc,
            "miou": self.miou,
            "fwiou": self.fwiou,
            "per_class_acc": self.per_class_acc,
            "per_class_iou": self.per_class_iou,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricBundle":
        return cls(
            pixel_acc=d["pixel_acc"],
            class_acc=d["class_acc"],
            miou=d["miou"],
            fwiou=d["fwiou"],
            per_class_acc=list(d["per_class_acc"]),
            per_class_iou=list(d["per_class_iou"]),
        )


def compute_metrics(conf: ConfusionMatrix) -> MetricBundle:
    """Derive all four measures from a non-empty confusion matrix.

    pixel_acc = trace/total; acc_k = conf[k,k]/rowsum_k;
    IoU_k = conf[k,k]/(rowsum_k + colsum_k - conf[k,k]);
    fwIoU = sum_k (rowsum_k/total) * IoU_k.
    """
    counts = conf.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts)
    rowsum = counts.sum(axis=1)
    colsum = counts.sum(axis=0)
    present = rowsum > 0

    pixel_acc = float(diag.sum() / total)
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(present, diag / np.where(present, rowsum, 1.0), np.nan)
        union = rowsum + colsum - diag
        iou = np.where(present, diag / np.where(union > 0, union, 1.0), np.nan)
    class_acc = float(np.nanmean(acc[present]))
    miou = float(np.nanmean(iou[present]))
    fwiou = float(np.sum((rowsum[present] / total) * iou[present]))

    to_list = lambda v: [None if not present[k] else float(v[k]) for k in range(conf.num_classes)]
    return MetricBundle(
        pixel_acc=pixel_acc,
        class_acc=class_acc,
        miou=miou,
        fwiou=fwiou,
        per_class_acc=to_list(acc),
        per_class_iou=to_list(iou),
    )


def write_report(path, bundle: MetricBundle, extra: dict | None = None) -> None:
    """Emit one evaluation as a flat JSON object."""
    doc = bundle.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_report(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
