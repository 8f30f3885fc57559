"""Confusion-matrix accumulation and mean intersection-over-union across the
background plus foreground classes. Ground-truth IGNORE pixels are skipped;
classes absent from both ground truth and prediction drop out of the mean.
"""

import numpy as np

from .losses import IGNORE

__all__ = ["new_confusion", "accumulate", "miou", "write_iou_csv"]


def new_confusion(n_classes):
    """(n_classes x n_classes) integer counts, rows = GT, cols = prediction."""
    return np.zeros((n_classes, n_classes), dtype=np.int64)


def accumulate(cm, gt, pred):
    """Add one image's pixel counts into cm."""
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    n = cm.shape[0]
    valid = gt != IGNORE
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= n or p.max() >= n):
        raise ValueError(f"label out of range for {n} classes")
    cm += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return cm


def miou(cm):
    """Per-class IoU (NaN where a class appears in neither GT nor
    prediction) and the mean over the defined classes."""
    cm = cm.astype(np.float64)
    diag = np.diag(cm)
    denom = cm.sum(axis=1) + cm.sum(axis=0) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(denom > 0, diag / np.where(denom > 0, denom, 1),
                             np.nan)
    mean = float(np.nanmean(per_class)) if np.any(denom > 0) else float("nan")
    return per_class, mean


def write_iou_csv(path, per_class, mean, class_names=None):
    """One row per class plus a mean row, mirroring the ablation table."""
    n = len(per_class)
    if class_names is None:
        class_names = ["background"] + [f"class{i}" for i in range(1, n)]
    with open(path, "w") as fh:
        fh.write("class,iou\n")
        for name, iou in zip(class_names, per_class):
            fh.write(f"{name},{'' if np.isnan(iou) else f'{iou:.6f}'}\n")
        fh.write(f"mean,{mean:.6f}\n")
