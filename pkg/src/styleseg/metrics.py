"""Voxel- and lesion-level segmentation metrics.

Conventions:

* Dice of two empty masks is 1.0.
* PR-AUC is the step-wise area under the exact precision-recall curve:
  thresholds are the distinct scores in descending order, and each recall
  increment is weighted by the precision reached at that threshold
  (no interpolated precision envelope). The curve starts at recall 0.
* A ground-truth lesion counts as detected when at least one of its pixels
  is predicted foreground; a predicted component is a false positive when
  it touches no ground-truth pixel.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

# 8-connectivity is the 2-d analog of 18-connectivity in 3-d (face + edge neighbours)
_OFFSETS = {
    4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


def _binary(mask, what: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{what} must be binary")
        arr = arr.astype(bool)
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice(pred, gt) -> float:
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    _same_shape(p, g)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def pr_auc(scores, gt) -> float:
    """Area under the precision-recall curve; NaN when ``gt`` has no positives."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = _binary(gt, "gt").ravel()
    if s.shape != g.shape:
        raise ValueError(f"shape mismatch: {np.shape(scores)} vs {np.shape(gt)}")
    positives = int(g.sum())
    if positives == 0:
        return float("nan")
    order = np.argsort(-s, kind="stable")
    s, g = s[order], g[order]
    # last index of each run of equal scores = one threshold
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(g)[ends].astype(np.float64)
    predicted = (ends + 1).astype(np.float64)
    precision = tp / predicted
    recall = tp / positives
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def connected_components(mask, connectivity: int = 8) -> tuple[np.ndarray, list[int]]:
    """Label connected foreground regions.

    Labels run 1..K in order of each component's first pixel in row-major
    order; ``sizes[k - 1]`` is the pixel count of label k.
    """
    if connectivity not in _OFFSETS:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    m = _binary(mask)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d mask, got shape {m.shape}")
    h, w = m.shape
    labels = np.zeros((h, w), dtype=np.int32)
    sizes: list[int] = []
    offsets = _OFFSETS[connectivity]
    fg = m.tolist()
    lab = [[0] * w for _ in range(h)]
    for r0, c0 in zip(*np.nonzero(m)):
        r0, c0 = int(r0), int(c0)
        if lab[r0][c0]:
            continue
        current = len(sizes) + 1
        lab[r0][c0] = current
        queue = deque([(r0, c0)])
        count = 0
        while queue:
            r, c = queue.popleft()
            count += 1
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and fg[rr][cc] and not lab[rr][cc]:
                    lab[rr][cc] = current
                    queue.append((rr, cc))
        sizes.append(count)
    if sizes:
        labels[:] = lab
    return labels, sizes


@dataclass
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2.0 * self.tp / denom


def detection_counts(pred, gt, small_only: int | None = None, connectivity: int = 8) -> DetectionCounts:
    """Lesion-level TP/FP/FN.

    With ``small_only=k`` only ground-truth lesions of at most k pixels are
    scored, and only predicted components of at most k pixels can be false
    positives.
    """
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    _same_shape(p, g)
    return _count(p, g, connected_components(p, connectivity), connected_components(g, connectivity),
                  small_only)


def _count(p, g, pred_cc, gt_cc, small_only) -> DetectionCounts:
    pr_labels, pr_sizes = pred_cc
    gt_labels, gt_sizes = gt_cc
    hit = np.zeros(len(gt_sizes) + 1, dtype=bool)
    hit[np.unique(gt_labels[p])] = True
    touches = np.zeros(len(pr_sizes) + 1, dtype=bool)
    touches[np.unique(pr_labels[g])] = True

    counts = DetectionCounts()
    for k, size in enumerate(gt_sizes, start=1):
        if small_only is not None and size > small_only:
            continue
        if hit[k]:
            counts.tp += 1
        else:
            counts.fn += 1
    for k, size in enumerate(pr_sizes, start=1):
        if small_only is not None and size > small_only:
            continue
        if not touches[k]:
            counts.fp += 1
    return counts


def detection_f1(pred, gt, small_only: int | None = None, connectivity: int = 8) -> float:
    """Lesion-level F1 = 2TP / (2TP + FP + FN); 1.0 when nothing is in scope."""
    return detection_counts(pred, gt, small_only, connectivity).f1


@dataclass
class MetricReport:
    dice: float
    pr_auc: float
    detection_f1: float
    small_lesion_f1: float
    threshold_used: float
    component_count_pred: int
    component_count_gt: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_masks(scores: np.ndarray, gts: np.ndarray, threshold: float, small_size: int = 10,
                   connectivity: int = 8) -> MetricReport:
    """Metrics pooled over a stack of images (scores, gts shaped K, H, W).

    Dice and PR-AUC pool every pixel of the stack; detection counts are
    summed image by image before forming F1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gts = _binary(gts, "gt")
    _same_shape(scores, gts)
    preds = scores >= threshold
    det = DetectionCounts()
    small = DetectionCounts()
    n_pred = n_gt = 0
    for p, g in zip(preds, gts):
        pcc, gcc = connected_components(p, connectivity), connected_components(g, connectivity)
        det = det + _count(p, g, pcc, gcc, None)
        small = small + _count(p, g, pcc, gcc, small_size)
        n_pred += len(pcc[1])
        n_gt += len(gcc[1])
    auc = pr_auc(scores, gts)
    return MetricReport(
        dice=dice(preds, gts),
        pr_auc=auc,
        detection_f1=det.f1,
        small_lesion_f1=small.f1,
        threshold_used=float(threshold),
        component_count_pred=n_pred,
        component_count_gt=n_gt,
    )
