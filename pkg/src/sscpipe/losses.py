"""Training objective components and IoU/mIoU evaluation.

Class channel convention throughout: channel 0 is the empty class, channels
1..K-1 are semantic classes, and label 255 marks unknown voxels that are
excluded from every loss and metric.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .depth_volume import DepthBinSpec, DepthDistribution
from .scene import UNKNOWN, VoxelGrid


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 0.001
    lambda_seg: float = 1.0

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_seg < 0:
            raise ValueError("loss weights must be non-negative")


def class_weights_from_frequencies(freq: np.ndarray) -> np.ndarray:
    """Inverse-log frequency weighting: 1 / log(1.02 + f)."""
    freq = np.asarray(freq, dtype=np.float64)
    return 1.0 / np.log(1.02 + freq)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    shifted = ad.add(x, -x.data.max(axis=axis, keepdims=True))
    lse = ad.log(ad.tsum(ad.exp(shifted), axes=axis, keepdims=True))
    return ad.add(shifted, ad.mul(lse, -1.0))


def _selected_logp(logits_flat: Tensor, labels: np.ndarray) -> Tensor:
    """Per-item log-probability of the labeled class; logits_flat is [K, N]."""
    k, n = logits_flat.shape
    logp = log_softmax(logits_flat, axis=0)
    onehot = np.zeros((k, n))
    onehot[labels, np.arange(n)] = 1.0
    return ad.tsum(ad.mul(logp, onehot), axes=0)


def weighted_ce(logits: Tensor, target: VoxelGrid, class_weights: np.ndarray) -> Tensor:
    """Class-weighted cross entropy over non-unknown voxels."""
    k = logits.shape[0]
    labels = target.labels.reshape(-1)
    mask = labels != UNKNOWN
    if not mask.any():
        warnings.warn("weighted_ce: all voxels unknown, loss defined as 0", stacklevel=2)
        return Tensor(np.asarray(0.0))
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (k,):
        raise ad.DimensionError(f"class_weights must have shape ({k},)")
    idx = np.nonzero(mask)[0]
    y = labels[idx].astype(np.int64)
    flat = ad.reshape(logits, (k, labels.size))
    sel = ad.gather_rows(ad.transpose(flat, (1, 0)), idx)  # [Ne, K]
    logp = _selected_logp(ad.transpose(sel, (1, 0)), y)
    return ad.mul(ad.mean(ad.mul(logp, class_weights[y])), -1.0)


def scal_loss(probs: Tensor, target: VoxelGrid, mode: str) -> Tensor:
    """Soft affinity loss on precision, recall and specificity.

    mode="geo" scores the single binary occupied class; mode="sem" averages
    over semantic classes present in the target. Classes with no target
    support (and degenerate denominators) are skipped.
    """
    if mode not in ("geo", "sem"):
        raise ValueError(f"mode must be 'geo' or 'sem', got {mode!r}")
    k = probs.shape[0]
    labels = target.labels.reshape(-1)
    mask = labels != UNKNOWN
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return Tensor(np.asarray(0.0))
    y_eval = labels[idx].astype(np.int64)
    flat = ad.gather_rows(ad.transpose(ad.reshape(probs, (k, labels.size)), (1, 0)), idx)  # [Ne, K]

    if mode == "geo":
        occupied_sel = np.zeros((k, 1))
        occupied_sel[1:, 0] = 1.0
        p_list = [ad.reshape(ad.matmul(flat, occupied_sel), (idx.size,))]
        y_list = [(y_eval != 0).astype(np.float64)]
    else:
        p_list, y_list = [], []
        for c in range(1, k):
            sel = np.zeros((k, 1))
            sel[c, 0] = 1.0
            p_list.append(ad.reshape(ad.matmul(flat, sel), (idx.size,)))
            y_list.append((y_eval == c).astype(np.float64))

    terms = []
    for p, y in zip(p_list, y_list):
        if y.sum() == 0.0:
            continue  # class absent from target: skipped
        tp = ad.tsum(ad.mul(p, y))
        pred_mass = ad.tsum(p)
        precision = ad.div(tp, pred_mass)
        recall = ad.mul(tp, 1.0 / y.sum())
        loss_c = ad.add(ad.mul(ad.log(precision), -1.0), ad.mul(ad.log(recall), -1.0))
        neg = 1.0 - y
        if neg.sum() > 0.0:
            tn = ad.tsum(ad.mul(ad.add(ad.mul(p, -1.0), 1.0), neg))
            specificity = ad.mul(tn, 1.0 / neg.sum())
            loss_c = ad.add(loss_c, ad.mul(ad.log(specificity), -1.0))
        terms.append(loss_c)
    if not terms:
        return Tensor(np.asarray(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def depth_loss(pred: DepthDistribution, gt_depth: np.ndarray, bins: DepthBinSpec) -> Tensor:
    """Cross entropy against the one-hot ground-truth depth bin, hit pixels only."""
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    hit = gt_depth > 0
    if not hit.any():
        warnings.warn("depth_loss: no hit pixels, loss defined as 0", stacklevel=2)
        return Tensor(np.asarray(0.0))
    d = pred.probs.shape[0]
    n = gt_depth.size
    idx = np.nonzero(hit.reshape(-1))[0]
    target_bin = bins.bin_of(gt_depth.reshape(-1)[idx])
    flat = ad.gather_rows(ad.transpose(ad.reshape(pred.probs, (d, n)), (1, 0)), idx)  # [Nh, D]
    onehot = np.zeros((idx.size, d))
    onehot[np.arange(idx.size), target_bin] = 1.0
    picked = ad.tsum(ad.mul(flat, onehot), axes=1)
    # hard (one-hot / resampled) distributions put exact zeros in some bins
    picked = ad.add(picked, 1e-12)
    return ad.mul(ad.mean(ad.log(picked)), -1.0)


def seg_loss_2d(logits2d: Tensor, labels2d: np.ndarray) -> Tensor:
    """Unweighted cross entropy over all pixels of the 2D label map."""
    k = logits2d.shape[0]
    labels = np.asarray(labels2d).reshape(-1).astype(np.int64)
    flat = ad.reshape(logits2d, (k, labels.size))
    logp = _selected_logp(flat, labels)
    return ad.mul(ad.mean(logp), -1.0)


def total_loss(l_d, l_seg, l_ce, l_scal_geo, l_scal_sem, weights: LossWeights):
    """Weighted sum: lambda_d * L_d + lambda_seg * L_seg + L_ce + L_geo + L_sem."""
    out = ad.mul(l_d, weights.lambda_d)
    out = ad.add(out, ad.mul(l_seg, weights.lambda_seg))
    out = ad.add(out, l_ce)
    out = ad.add(out, l_scal_geo)
    return ad.add(out, l_scal_sem)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

class ConfusionMatrix:
    """Per-voxel confusion counts over all classes incl. empty; unknowns excluded."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred_labels: np.ndarray, gt_labels: np.ndarray) -> None:
        pred = np.asarray(pred_labels).reshape(-1).astype(np.int64)
        gt = np.asarray(gt_labels).reshape(-1).astype(np.int64)
        if pred.shape != gt.shape:
            raise ad.DimensionError("prediction and ground truth differ in size")
        keep = gt != UNKNOWN
        pred, gt = pred[keep], gt[keep]
        np.add.at(self.counts, (gt, pred), 1)

    def total(self) -> int:
        return int(self.counts.sum())

    def geometric_iou(self) -> float:
        occ_gt = self.counts[1:, :]
        tp = int(occ_gt[:, 1:].sum())
        fn = int(occ_gt[:, 0].sum())
        fp = int(self.counts[0, 1:].sum())
        denom = tp + fp + fn
        return tp / denom if denom else 0.0

    def class_iou(self, c: int) -> float | None:
        tp = int(self.counts[c, c])
        fp = int(self.counts[:, c].sum()) - tp
        fn = int(self.counts[c, :].sum()) - tp
        denom = tp + fp + fn
        return tp / denom if denom else None


def evaluate(pred: VoxelGrid, gt: VoxelGrid, num_classes: int | None = None):
    """(geometric IoU, per-semantic-class IoU, mIoU) with unknown masking.

    mIoU averages semantic classes present in ground truth or prediction;
    the empty class never enters the mean. Per-class IoU is NaN for absent
    classes.
    """
    if tuple(pred.dims) != tuple(gt.dims):
        raise ad.DimensionError(f"grid dims differ: {pred.dims} vs {gt.dims}")
    if num_classes is None:
        valid = np.concatenate([pred.labels[pred.labels != UNKNOWN].reshape(-1),
                                gt.labels[gt.labels != UNKNOWN].reshape(-1)])
        num_classes = int(valid.max(initial=0)) + 1
    cm = ConfusionMatrix(num_classes)
    cm.update(pred.labels, gt.labels)

    per_class = np.full(num_classes - 1, np.nan)
    present = []
    for c in range(1, num_classes):
        iou = cm.class_iou(c)
        if iou is not None:
            per_class[c - 1] = iou
            present.append(iou)
    miou = float(np.mean(present)) if present else 0.0
    return cm.geometric_iou(), per_class, miou


def metrics_report(iou: float, per_class: np.ndarray, miou: float,
                   class_names: list[str] | None = None) -> str:
    """JSON metrics object: {iou, miou, per_class: [{name, iou}]}."""
    names = class_names or [f"class_{c + 1}" for c in range(len(per_class))]
    entries = [{"name": n, "iou": None if np.isnan(v) else round(float(v), 6)}
               for n, v in zip(names, per_class)]
    return json.dumps({"iou": round(float(iou), 6), "miou": round(float(miou), 6),
                       "per_class": entries}, indent=2)


def metrics_table(rows: list[dict], columns=("IoU", "mIoU")) -> str:
    """Aligned plain-text table; rows are dicts with "setting" plus column keys."""
    width = max([len("Setting")] + [len(str(r["setting"])) for r in rows]) + 2
    header = "Setting".ljust(width) + "".join(c.rjust(10) for c in columns)
    lines = [header, "-" * len(header)]
    for r in rows:
        cells = "".join(
            (f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c])).rjust(10) for c in columns)
        lines.append(str(r["setting"]).ljust(width) + cells)
    return "\n".join(lines)
