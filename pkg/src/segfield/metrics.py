"""Segmentation, image and reconstruction metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

METRICS_SCHEMA = "metrics_v1"
DEFAULT_TAU = 0.02


def confusion_matrix(truth, pred, num_labels: int) -> np.ndarray:
    """(K, K) counts with rows = ground truth, columns = prediction."""
    t = np.asarray(truth, dtype=np.int64).ravel()
    p = np.asarray(pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"truth has {t.size} elements, prediction {p.size}")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= num_labels):
        raise ValueError(f"labels must lie in [0, {num_labels})")
    return np.bincount(t * num_labels + p, minlength=num_labels * num_labels).reshape(num_labels, num_labels)


def miou(cm, ignore=()) -> dict:
    """Per-class IoU and their mean over classes present in truth or prediction.

    Classes in ``ignore`` are dropped from the mean (e.g. background in 3D).
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.size == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm)
    fp = cm.sum(0) - tp
    fn = cm.sum(1) - tp
    denom = tp + fp + fn
    iou = np.divide(tp, denom, out=np.full_like(tp, np.nan), where=denom > 0)
    keep = denom > 0
    for c in ignore:
        keep[c] = False
    return {"iou": iou, "miou": float(np.mean(iou[keep])) if keep.any() else float("nan")}


def accuracy(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    return float(np.trace(cm) / cm.sum())


def mean_accuracy(cm, ignore=()) -> float:
    """Mean per-class recall over classes present in the ground truth."""
    cm = np.asarray(cm, dtype=np.float64)
    support = cm.sum(1)
    keep = support > 0
    for c in ignore:
        keep[c] = False
    return float(np.mean(np.diag(cm)[keep] / support[keep]))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    err = np.mean((a - b) ** 2)
    return float("inf") if err == 0 else float(10 * np.log10(1.0 / err))


@dataclass
class ReconMetrics:
    chamfer: float
    precision: float
    recall: float
    fscore: float
    tau: float

    def to_dict(self) -> dict:
        return asdict(self)


def _prf(d_pred: np.ndarray, d_gt: np.ndarray, tau: float, chamfer: float) -> ReconMetrics:
    p = float(np.mean(d_pred <= tau))
    r = float(np.mean(d_gt <= tau))
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return ReconMetrics(chamfer, p, r, f, tau)


def nn_distances(src, dst) -> np.ndarray:
    """Euclidean distance from each src point to its nearest dst point."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    _, idx = cKDTree(dst).query(src, k=1)
    # recompute from the matched pairs so the value does not depend on tree internals
    return np.sqrt(((src - dst[idx]) ** 2).sum(1))


def chamfer_fscore(pred, gt, tau: float = DEFAULT_TAU) -> ReconMetrics:
    """Symmetric chamfer (mean squared NN distance, averaged over both directions) and F-score."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError(f"chamfer needs nonempty point sets (got {len(pred)} predicted, {len(gt)} ground truth)")
    d_pred = nn_distances(pred, gt)
    d_gt = nn_distances(gt, pred)
    cd = 0.5 * (np.mean(d_pred ** 2) + np.mean(d_gt ** 2))
    return _prf(d_pred, d_gt, tau, float(cd))


def seg_report(truth, pred, num_labels: int, task: str) -> dict:
    """mIoU / accuracy / mean accuracy; 3D tasks exclude the background class."""
    cm = confusion_matrix(truth, pred, num_labels)
    ignore = (0,) if task == "seg3d" else ()
    res = miou(cm, ignore)
    return {"miou": res["miou"], "iou": [None if np.isnan(v) else float(v) for v in res["iou"]],
            "accuracy": accuracy(cm), "mean_accuracy": mean_accuracy(cm, ignore),
            "confusion": cm.tolist()}
