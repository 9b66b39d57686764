"""Multi-label AUC, accuracy/sensitivity, box IoU and AP@IoU.

The fast routines each have a brute-force twin (``*_bruteforce``) used by
the test-suite as an independent oracle.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """Rank-based ROC AUC (Mann-Whitney U), ties count one half.

    Returns NaN when ``labels`` holds a single class.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return math.nan
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (pos.size * neg.size)


def per_class_auc(scores: np.ndarray, labels: np.ndarray) -> list[float]:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return [auc(scores[:, k], labels[:, k]) for k in range(labels.shape[1])]


def mean_auc(per_class: list[float]) -> tuple[float, int]:
    """Mean over defined classes, plus the number of excluded (undefined) ones."""
    defined = [a for a in per_class if not math.isnan(a)]
    excluded = len(per_class) - len(defined)
    if excluded:
        warnings.warn(f"{excluded} class(es) have single-class labels; excluded from mean AUC", stacklevel=2)
    return (float(np.mean(defined)) if defined else math.nan), excluded


def accuracy_sensitivity(pred_class, true_class, target_class) -> tuple[float, float]:
    """Overall accuracy and recall of ``target_class``; sensitivity is NaN if that class is absent."""
    pred = np.asarray(pred_class)
    true = np.asarray(true_class)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    acc = float((pred == true).mean()) if true.size else math.nan
    is_target = true == target_class
    if not is_target.any():
        return acc, math.nan
    tp = int((pred[is_target] == target_class).sum())
    return acc, tp / int(is_target.sum())


# -- boxes ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Half-open pixel box [x, x+w) x [y, y+h)."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive extent, got w={self.w}, h={self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def contains(self, px: int, py: int) -> bool:
        return self.x <= px < self.x + self.w and self.y <= py < self.y + self.h


def iou(a: Box, b: Box) -> float:
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_pixelcount(a: Box, b: Box) -> float:
    """IoU by rasterizing both boxes; an oracle for :func:`iou`."""
    w = max(a.x + a.w, b.x + b.w) - min(a.x, b.x)
    h = max(a.y + a.h, b.y + b.h) - min(a.y, b.y)
    ox, oy = min(a.x, b.x), min(a.y, b.y)
    ma = np.zeros((h, w), bool)
    mb = np.zeros((h, w), bool)
    ma[a.y - oy:a.y - oy + a.h, a.x - ox:a.x - ox + a.w] = True
    mb[b.y - oy:b.y - oy + b.h, b.x - ox:b.x - ox + b.w] = True
    return (ma & mb).sum() / (ma | mb).sum()


def average_precision(ious, threshold: float) -> float:
    """Fraction of cases with IoU strictly above ``threshold``; NaN for no cases.

    One predicted box per ground-truth case; a missing prediction counts as IoU 0.
    """
    arr = np.asarray(ious, dtype=np.float64)
    if arr.size == 0:
        return math.nan
    return float((arr > threshold).mean())


# -- reports ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    per_class_auc: list[float]
    mean_auc: float
    accuracy: float = math.nan
    per_class_sensitivity: list[float] = field(default_factory=list)
    n_samples: int = 0
    excluded_classes: int = 0

    @classmethod
    def from_scores(cls, scores: np.ndarray, labels: np.ndarray) -> "EvalReport":
        """Multi-label report; accuracy/sensitivity use a 0.5 probability threshold per class."""
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels).astype(int)
        pc = per_class_auc(scores, labels)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mauc, excluded = mean_auc(pc)
        pred = (scores > 0.5).astype(int) if scores.min() >= 0 and scores.max() <= 1 else (scores > 0).astype(int)
        acc = float((pred == labels).mean()) if labels.size else math.nan
        sens = []
        for k in range(labels.shape[1]):
            pos = labels[:, k] == 1
            sens.append(float(pred[pos, k].mean()) if pos.any() else math.nan)
        return cls(pc, mauc, acc, sens, int(labels.shape[0]), excluded)

    @classmethod
    def from_single_label(cls, logits: np.ndarray, true_class: np.ndarray) -> "EvalReport":
        """Single-label report: argmax prediction, one-vs-rest AUCs, per-class sensitivity."""
        logits = np.asarray(logits, dtype=np.float64)
        true_class = np.asarray(true_class)
        k = logits.shape[1]
        onehot = np.eye(k, dtype=int)[true_class]
        pc = per_class_auc(logits, onehot)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mauc, excluded = mean_auc(pc)
        pred = logits.argmax(axis=1)
        acc = float((pred == true_class).mean())
        sens = [accuracy_sensitivity(pred, true_class, c)[1] for c in range(k)]
        return cls(pc, mauc, acc, sens, int(len(true_class)), excluded)

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        d = self.to_dict()
        d["per_class_auc"] = [None if a is None or (isinstance(a, float) and math.isnan(a)) else a
                              for a in d["per_class_auc"]]
        d["per_class_sensitivity"] = [None if isinstance(a, float) and math.isnan(a) else a
                                      for a in d["per_class_sensitivity"]]
        return json.dumps(d, indent=2)

    def csv_rows(self, class_names: list[str] | None = None) -> list[list]:
        names = class_names or [f"class_{i}" for i in range(len(self.per_class_auc))]
        rows = [["class", "auc", "sensitivity"]]
        for i, name in enumerate(names):
            sens = self.per_class_sensitivity[i] if i < len(self.per_class_sensitivity) else math.nan
            rows.append([name, self.per_class_auc[i], sens])
        rows.append(["mean", self.mean_auc, ""])
        return rows

    def to_csv(self, class_names: list[str] | None = None) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.csv_rows(class_names))
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"n={self.n_samples}  mAUC={self.mean_auc:.4f}  accuracy={self.accuracy:.4f}"]
        for i, a in enumerate(self.per_class_auc):
            lines.append(f"  class {i}: AUC={a:.4f}")
        if self.excluded_classes:
            lines.append(f"  ({self.excluded_classes} class(es) undefined, excluded from the mean)")
        return "\n".join(lines)
