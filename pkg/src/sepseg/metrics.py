"""Segmentation metrics: confusion-matrix IoU, small-object IoU, boundary
F-score at a pixel tolerance, and pixel accuracy.

`MetricAccumulator` streams (pred, gt) label-map pairs and pools counts so a
whole eval split yields one report:

- the K x K confusion matrix (rows = ground truth, ignore pixels dropped),
- per-(image, class) intersection/union pooled only where that image's
  ground-truth area for the class is positive and below the small-object
  threshold,
- boundary match counts, where a boundary pixel counts as matched if the
  other map has a boundary pixel within `boundary_tol` (Chebyshev distance).
"""

from dataclasses import dataclass

import numpy as np

from .losses import boundary_map


@dataclass
class MetricReport:
    per_class_iou: list   # NaN where the class union is empty
    miou: float           # mean over classes with nonzero union
    small_miou: float     # same, restricted to small-object occurrences
    boundary_f: float
    pixel_acc: float

    def as_dict(self) -> dict:
        return {
            "per_class_iou": [float(v) for v in self.per_class_iou],
            "miou": float(self.miou),
            "small_miou": float(self.small_miou),
            "boundary_f": float(self.boundary_f),
            "pixel_acc": float(self.pixel_acc),
        }


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_value: int = 255) -> np.ndarray:
    """K x K counts, rows indexed by ground truth, columns by prediction."""
    if pred.shape != gt.shape:
        raise ValueError(f"confusion_matrix: shape mismatch {pred.shape} vs {gt.shape}")
    valid = gt != ignore_value
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes or g.max() >= num_classes):
        raise ValueError("confusion_matrix: label outside [0, num_classes)")
    flat = g * num_classes + p
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=1) + conf.sum(axis=0) - np.diag(conf)
    out = np.full(conf.shape[0], np.nan)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def _dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    out = mask
    for _ in range(iterations):
        p = np.pad(out, 1)
        out = (p[:-2, :-2] | p[:-2, 1:-1] | p[:-2, 2:]
               | p[1:-1, :-2] | p[1:-1, 1:-1] | p[1:-1, 2:]
               | p[2:, :-2] | p[2:, 1:-1] | p[2:, 2:])
    return out


def _mean_defined(values: np.ndarray) -> float:
    defined = values[np.isfinite(values)]
    return float(defined.mean()) if defined.size else float("nan")


class MetricAccumulator:
    def __init__(self, num_classes: int, small_area_threshold: int = 160,
                 boundary_tol: int = 1, ignore_value: int = 255):
        self.num_classes = num_classes
        self.small_area_threshold = small_area_threshold
        self.boundary_tol = boundary_tol
        self.ignore_value = ignore_value
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.small_inter = np.zeros(num_classes, dtype=np.int64)
        self.small_union = np.zeros(num_classes, dtype=np.int64)
        self.b_matched_pred = 0
        self.b_total_pred = 0
        self.b_matched_gt = 0
        self.b_total_gt = 0

    def update(self, pred: np.ndarray, gt: np.ndarray):
        """Accepts one (H, W) pair or a batch of (B, H, W) pairs."""
        if pred.shape != gt.shape:
            raise ValueError(f"metrics: shape mismatch {pred.shape} vs {gt.shape}")
        if pred.ndim == 2:
            pred, gt = pred[None], gt[None]
        if pred.ndim != 3:
            raise ValueError(f"metrics: expected (H,W) or (B,H,W), got {pred.shape}")
        for b in range(pred.shape[0]):
            self._update_one(pred[b], gt[b])

    def _update_one(self, pred, gt):
        conf = confusion_matrix(pred, gt, self.num_classes, self.ignore_value)
        self.confusion += conf

        gt_area = conf.sum(axis=1)
        small = (gt_area > 0) & (gt_area < self.small_area_threshold)
        for c in np.nonzero(small)[0]:
            self.small_inter[c] += conf[c, c]
            self.small_union[c] += gt_area[c] + conf[:, c].sum() - conf[c, c]

        valid = gt != self.ignore_value
        gt_b = boundary_map(gt[None], self.ignore_value)[0]
        pred_b = boundary_map(pred[None], self.ignore_value)[0] & valid
        tol = self.boundary_tol
        self.b_total_pred += int(pred_b.sum())
        self.b_total_gt += int(gt_b.sum())
        if pred_b.any() and gt_b.any():
            self.b_matched_pred += int((pred_b & _dilate(gt_b, tol)).sum())
            self.b_matched_gt += int((gt_b & _dilate(pred_b, tol)).sum())

    def report(self) -> MetricReport:
        iou = iou_from_confusion(self.confusion)
        total = self.confusion.sum()
        pixel_acc = float(np.diag(self.confusion).sum() / total) if total else float("nan")

        small_iou = np.full(self.num_classes, np.nan)
        nz = self.small_union > 0
        small_iou[nz] = self.small_inter[nz] / self.small_union[nz]

        if self.b_total_pred == 0 and self.b_total_gt == 0:
            bf = 1.0
        else:
            prec = self.b_matched_pred / self.b_total_pred if self.b_total_pred else 0.0
            rec = self.b_matched_gt / self.b_total_gt if self.b_total_gt else 0.0
            bf = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0

        return MetricReport(per_class_iou=list(iou), miou=_mean_defined(iou),
                            small_miou=_mean_defined(small_iou),
                            boundary_f=bf, pixel_acc=pixel_acc)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                    small_area_threshold: int = 160, boundary_tol: int = 1,
                    ignore_value: int = 255) -> MetricReport:
    acc = MetricAccumulator(num_classes, small_area_threshold, boundary_tol,
                            ignore_value)
    acc.update(pred, gt)
    return acc.report()
