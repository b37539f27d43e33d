"""Independent reference implementations used to pin expected values.

Everything here is deliberately brute force and kept apart from the library
code paths it checks.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment


def matching_instance(rng, box=64, max_gt=8, max_det=8):
    """Detector-like random instance: up to max_gt ground-truth points, each
    detected with 2 px localization noise at 80% probability, plus up to two
    uniform false alarms. Point density tops out around twice the densest
    herds observed in the source imagery."""
    m = int(rng.integers(0, max_gt + 1))
    gts = np.column_stack([rng.uniform(0, box, m), rng.uniform(0, box, m)])
    dets = []
    for g in gts:
        if rng.random() < 0.8:
            dets.append([g[0] + rng.normal(0, 2.0), g[1] + rng.normal(0, 2.0),
                         rng.uniform(0.3, 1.0)])
    for _ in range(int(rng.integers(0, 3))):
        dets.append([rng.uniform(0, box), rng.uniform(0, box), rng.uniform(0, 1.0)])
    dets = np.array(dets, dtype=float).reshape(-1, 3)[:max_det]
    return dets, gts


def finite_difference_gradients(model, loss_fn, n_samples=50, h=1e-6, seed=0):
    """Central-difference check of autograd gradients on randomly sampled
    parameter entries of a double-precision model. Returns the worst
    relative error over the sample."""
    import torch

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_samples):
        p = params[int(rng.integers(len(params)))]
        idx = int(rng.integers(p.numel()))
        analytic = float(p.grad.view(-1)[idx])
        with torch.no_grad():
            orig = float(p.data.view(-1)[idx])
            step = h * max(1.0, abs(orig))
            p.data.view(-1)[idx] = orig + step
            lp = float(loss_fn())
            p.data.view(-1)[idx] = orig - step
            lm = float(loss_fn())
            p.data.view(-1)[idx] = orig
        numeric = (lp - lm) / (2 * step)
        denom = max(abs(analytic), abs(numeric))
        err = abs(analytic - numeric) / denom if denom > 1e-7 \
            else abs(analytic - numeric)
        worst = max(worst, err)
    return worst


def max_matching_tp_count(detections, gt, radius: float) -> int:
    """Maximum-cardinality one-to-one matching within the radius, via an
    assignment problem on the bipartite distance graph."""
    det = np.asarray(detections, dtype=float).reshape(-1, 3)
    gts = np.asarray(gt, dtype=float).reshape(-1, 2)
    if len(det) == 0 or len(gts) == 0:
        return 0
    d = np.sqrt(((det[:, None, :2] - gts[None, :, :]) ** 2).sum(-1))
    # maximize matched pairs: cost 0 for feasible edges, 1 for infeasible;
    # pad to square so every row/col can stay unmatched at cost 1
    n = max(len(det), len(gts))
    cost = np.ones((n, n))
    cost[:len(det), :len(gts)] = np.where(d <= radius, 0.0, 1.0)
    rows, cols = linear_sum_assignment(cost)
    return int(np.sum(cost[rows, cols] == 0.0))


def windowed_strict_maxima(heatmap: np.ndarray, threshold: float, window: int = 3):
    """Exhaustive scan: pixels strictly greater than every other pixel in
    their window x window neighborhood and above the threshold."""
    h, w = heatmap.shape
    r = window // 2
    peaks = []
    for y in range(h):
        for x in range(w):
            v = heatmap[y, x]
            if v < threshold:
                continue
            neigh = heatmap[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
            if np.sum(neigh >= v) == 1 and v == neigh.max():
                peaks.append((x, y, float(v)))
    return peaks


def ap_by_explicit_sweep(samples, radius: float, match_fn) -> float | None:
    """Average precision by literally re-matching at every unique confidence
    threshold and integrating the precision envelope."""
    all_conf = sorted({float(c) for dets, _ in samples
                       for c in np.asarray(dets, dtype=float).reshape(-1, 3)[:, 2]},
                      reverse=True)
    n_gt = sum(len(np.asarray(g, dtype=float).reshape(-1, 2)) for _, g in samples)
    if n_gt == 0:
        return None
    if not all_conf:
        return 0.0
    points = []
    for tau in all_conf:
        tp = fp = 0
        for dets, gts in samples:
            det = np.asarray(dets, dtype=float).reshape(-1, 3)
            kept = det[det[:, 2] >= tau]
            res = match_fn(kept, gts, radius)
            tp += res.n_tp
            fp += res.n_fp
        points.append((tp / n_gt, tp / (tp + fp) if tp + fp else 0.0))
    recalls = np.array([r for r, _ in points])
    precs = np.array([p for _, p in points])
    env = np.maximum.accumulate(precs[::-1])[::-1]
    prev, area = 0.0, 0.0
    for r, p in zip(recalls, env):
        area += (r - prev) * p
        prev = r
    return 100.0 * area


def blob_centers(image: np.ndarray, dark_threshold: float):
    """Connected-component centers of dark blobs on a light background.
    Used to confirm synthetic scenes render an animal per annotation."""
    from scipy import ndimage

    gray = image.mean(axis=-1) if image.ndim == 3 else image
    mask = gray < dark_threshold
    labeled, n = ndimage.label(mask)
    centers = ndimage.center_of_mass(mask, labeled, range(1, n + 1))
    return [(cx, cy) for cy, cx in centers]


def exhaustive_split_best_deviation(point_counts, ratios) -> float:
    """Best achievable max point-share deviation (percentage points) over all
    assignments of the given images to three splits. Exponential; keep the
    instance small."""
    counts = list(point_counts)
    total = sum(counts)
    best = math.inf
    n = len(counts)
    for code in range(3 ** n):
        sums = [0, 0, 0]
        c = code
        for i in range(n):
            sums[c % 3] += counts[i]
            c //= 3
        dev = max(abs(100.0 * sums[k] / total - 100.0 * ratios[k]) for k in range(3))
        best = min(best, dev)
    return best
