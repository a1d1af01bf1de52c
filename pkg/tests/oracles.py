"""Independent reference implementations used as test oracles.

Each is written the slow, obvious way and shares no code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import ndimage


def conv2d_loops(x, w, b=None, stride=1, pad=None):
    """Direct nested-loop cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    k, c2, kh, kw = w.shape
    assert c == c2
    pad = kh // 2 if pad is None else pad
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for ni in range(n):
        for ki in range(k):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[ki])
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                y = i * stride + di - pad
                                xx = j * stride + dj - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[ni, ci, y, xx] * w[ki, ci, di, dj]
                    out[ni, ki, i, j] = acc
    return out


def dice_sets(pred, gt) -> float:
    p = {tuple(i) for i in np.argwhere(pred)}
    g = {tuple(i) for i in np.argwhere(gt)}
    if not p and not g:
        return 1.0
    return 2 * len(p & g) / (len(p) + len(g))


def pr_auc_enumerate(scores, gt) -> float:
    """Sweep every distinct threshold high to low; area = sum of recall gain times precision."""
    s = np.asarray(scores, dtype=float).ravel()
    g = np.asarray(gt, dtype=bool).ravel()
    pos = g.sum()
    if pos == 0:
        return float("nan")
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        pred = s >= t
        tp = float(np.sum(pred & g))
        precision = tp / pred.sum()
        recall = tp / pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


class UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def components_union_find(mask, connectivity=8):
    """List of components (sets of pixels) via union-find over neighbour pairs."""
    m = np.asarray(mask, dtype=bool)
    uf = UnionFind()
    pix = [tuple(p) for p in np.argwhere(m)]
    for p in pix:
        uf.find(p)
    for (r, c) in pix:
        for dr, dc in itertools.product((-1, 0, 1), repeat=2):
            if (dr, dc) == (0, 0) or (connectivity == 4 and dr and dc):
                continue
            q = (r + dr, c + dc)
            if 0 <= q[0] < m.shape[0] and 0 <= q[1] < m.shape[1] and m[q]:
                uf.union((r, c), q)
    groups = {}
    for p in pix:
        groups.setdefault(uf.find(p), set()).add(p)
    return sorted(groups.values(), key=min)


def detection_f1_bruteforce(pred, gt, small_only=None) -> float:
    """Lesion F1 from scipy labelling and explicit overlap checks."""
    structure = np.ones((3, 3), dtype=int)
    pl, pn = ndimage.label(pred, structure)
    gl, gn = ndimage.label(gt, structure)
    tp = fn = fp = 0
    for k in range(1, gn + 1):
        comp = gl == k
        if small_only is not None and comp.sum() > small_only:
            continue
        if np.any(comp & np.asarray(pred, bool)):
            tp += 1
        else:
            fn += 1
    for k in range(1, pn + 1):
        comp = pl == k
        if small_only is not None and comp.sum() > small_only:
            continue
        if not np.any(comp & np.asarray(gt, bool)):
            fp += 1
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def threshold_sweep(scores, labels):
    """Best F1 grid threshold by brute force: first grid point reaching the max."""
    s = np.asarray(scores, float).ravel()
    g = np.asarray(labels, bool).ravel()
    best_t, best = None, -1.0
    for i in range(101):
        t = i / 100
        pred = s >= t
        tp = np.sum(pred & g)
        denom = pred.sum() + g.sum()
        f1 = 2 * tp / denom if denom else 0.0
        if f1 > best:
            best, best_t = f1, t
    return best_t


def parameter_count(in_channels, widths, sets):
    """Walk the U-Net layout: 3x3 convs, 2x2 transposed ups, 1x1 head, 2*w affines per set."""
    count = 0
    cin = in_channels
    for b in range(4):
        count += 9 * cin * widths[b] + widths[b]
        count += 9 * widths[b] * widths[b] + widths[b]
        cin = widths[b]
    for b in range(4, 7):
        skip = widths[6 - b]
        count += 4 * cin * widths[b] + widths[b]
        count += 9 * (widths[b] + skip) * widths[b] + widths[b]
        count += 9 * widths[b] * widths[b] + widths[b]
        cin = widths[b]
    count += widths[-1] + 1
    count += sets * sum(2 * 2 * w for w in widths)  # two norm layers per block
    return count


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na < 1e-12 or nb < 1e-12:
        return None
    return sum(x * y for x, y in zip(a, b)) / (na * nb)
