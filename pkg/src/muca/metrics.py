"""Confusion-matrix segmentation metrics: IoU, P/R/F1, OA, PRE, Kappa."""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .augment import IGNORE


class ConfusionMatrix:
    """counts[i, j] = pixels of true class i predicted as j."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes) or np.any(self.counts < 0):
            raise ValueError("counts must be a K x K non-negative integer matrix")

    @property
    def total(self):
        return int(self.counts.sum())

    def accumulate(self, pred, truth, ignore_index=IGNORE):
        """Add one prediction/truth pair in place and return self."""
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
        keep = truth != ignore_index
        p, t = pred[keep].astype(np.int64), truth[keep].astype(np.int64)
        k = self.num_classes
        if t.size and (t.max() >= k or p.max() >= k or t.min() < 0 or p.min() < 0):
            raise ValueError(f"class id outside [0, {k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def row_normalized(self):
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


def accumulate(cm, pred, truth, ignore_index=IGNORE):
    return cm.accumulate(pred, truth, ignore_index)


@dataclass
class MetricsReport:
    iou: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    miou: float
    mf1: float
    oa: float
    pre: float
    kappa: float
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    degenerate: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "iou", "precision", "recall", "f1", "tp", "fp", "fn", "tn",
                    "degenerate", "oa", "pre", "kappa"])
        for c in range(len(self.iou)):
            w.writerow([c, repr(float(self.iou[c])), repr(float(self.precision[c])),
                        repr(float(self.recall[c])), repr(float(self.f1[c])),
                        int(self.tp[c]), int(self.fp[c]), int(self.fn[c]), int(self.tn[c]),
                        int(c in self.degenerate), "", "", ""])
        w.writerow(["mean", repr(self.miou), "", "", repr(self.mf1), int(self.tp.sum()),
                    int(self.fp.sum()), int(self.fn.sum()), "", len(self.degenerate),
                    repr(self.oa), repr(self.pre), repr(self.kappa)])
        return buf.getvalue()


def _ratio(num, den):
    ok = den > 0
    return np.divide(num, den, out=np.zeros(num.shape), where=ok), ~ok


def metrics_from(cm):
    """Per-class one-vs-rest metrics plus multi-class OA / PRE / Kappa.

    A per-class ratio with a zero denominator is reported as 0 and the class
    is flagged in ``degenerate``; such classes still count toward the means.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    tn = total - tp - fp - fn
    iou, bad_iou = _ratio(tp, tp + fp + fn)
    recall, bad_r = _ratio(tp, tp + fn)
    precision, bad_p = _ratio(tp, tp + fp)
    f1, bad_f1 = _ratio(2.0 * recall * precision, recall + precision)
    degenerate = sorted(set(np.flatnonzero(bad_iou | bad_r | bad_p | bad_f1).tolist()))
    oa = float(tp.sum() / total)
    pre = float((counts.sum(axis=1) * counts.sum(axis=0)).sum() / total ** 2)
    kappa = 1.0 if pre >= 1.0 else (oa - pre) / (1.0 - pre)
    return MetricsReport(iou, precision, recall, f1, float(iou.mean()), float(f1.mean()), oa,
                         pre, float(kappa), tp.astype(np.int64), fp.astype(np.int64),
                         fn.astype(np.int64), tn.astype(np.int64), degenerate)


def confusion_csv(cm, normalize=False):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    mat = cm.row_normalized() if normalize else cm.counts
    for row in mat:
        w.writerow([repr(float(v)) if normalize else int(v) for v in row])
    return buf.getvalue()
