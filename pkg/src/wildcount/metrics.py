"""Detection and counting metrics: point matching at a pixel radius,
precision/recall/F1, average precision, MAE, total counting error, count
scatter R2, and bootstrap confidence intervals.

All rate metrics are returned as percentages in [0, 100]; counting errors
keep their natural units. Matching is one-to-one greedy by descending
confidence: each detection claims its nearest still-unmatched ground-truth
point within the radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_MATCH_RADIUS = 4.0


def _as_detections(detections) -> np.ndarray:
    """Coerce to an (N, 3) float array of x, y, confidence."""
    arr = np.asarray(detections, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("detections must be (N, 3): x, y, confidence")
    return arr


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("points must be (M, 2): x, y")
    return arr


@dataclass
class MatchResult:
    """One-to-one matching between detections and ground-truth points.

    Members hold indices into the input arrays: tp_pairs as
    (detection_index, gt_index), fp as unmatched detection indices, fn as
    unmatched ground-truth indices.
    """

    tp_pairs: list[tuple[int, int]]
    fp: list[int]
    fn: list[int]
    radius: float

    @property
    def n_tp(self) -> int:
        return len(self.tp_pairs)

    @property
    def n_fp(self) -> int:
        return len(self.fp)

    @property
    def n_fn(self) -> int:
        return len(self.fn)


def match_points(detections, gt, radius: float = DEFAULT_MATCH_RADIUS) -> MatchResult:
    """Greedy one-to-one matching at the given Euclidean radius.

    Detections are processed in descending confidence (ties broken by
    (x, y) lexicographic order); each claims its nearest unmatched ground
    truth within the radius. A prefix of the confidence-ranked detections
    always matches exactly as if the suffix were absent, which is what lets
    a single pass drive the threshold sweeps in compute_ap and calibration.
    """
    det = _as_detections(detections)
    gts = _as_points(gt)
    order = np.lexsort((det[:, 1], det[:, 0], -det[:, 2])) if len(det) else np.array([], int)

    tp_pairs: list[tuple[int, int]] = []
    fp: list[int] = []
    taken = np.zeros(len(gts), dtype=bool)
    if len(gts):
        tree = cKDTree(gts)
        for di in order:
            cand = tree.query_ball_point(det[di, :2], r=radius)
            best = -1
            best_d = math.inf
            for gi in cand:
                if taken[gi]:
                    continue
                d = math.hypot(det[di, 0] - gts[gi, 0], det[di, 1] - gts[gi, 1])
                if d < best_d - 1e-12 or (abs(d - best_d) <= 1e-12 and gi < best):
                    best, best_d = gi, d
            if best >= 0:
                taken[best] = True
                tp_pairs.append((int(di), int(best)))
            else:
                fp.append(int(di))
    else:
        fp = [int(i) for i in order]
    fn = [int(i) for i in np.nonzero(~taken)[0]] if len(gts) else []
    return MatchResult(tp_pairs=tp_pairs, fp=fp, fn=fn, radius=radius)


def prf_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 as percentages; degenerate denominators give 0."""
    precision = 100.0 * tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = f1_from_pr(precision, recall)
    return precision, recall, f1


def f1_from_pr(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (all in percent)."""
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_prf(match: MatchResult) -> tuple[float, float, float]:
    return prf_from_counts(match.n_tp, match.n_fp, match.n_fn)


def _ranked_tp_flags(samples: Sequence[tuple[object, object]], radius: float,
                     ) -> tuple[np.ndarray, np.ndarray, int]:
    """Pool detections across units, greedily matched per unit.

    Returns (confidences, tp_flags) sorted by descending confidence plus the
    total ground-truth count. Greedy matching of the full per-unit detection
    list labels every detection TP/FP such that any confidence prefix equals
    a fresh match restricted to that prefix.
    """
    confs: list[np.ndarray] = []
    flags: list[np.ndarray] = []
    n_gt = 0
    for dets, gts in samples:
        det = _as_detections(dets)
        gtp = _as_points(gts)
        n_gt += len(gtp)
        if len(det) == 0:
            continue
        result = match_points(det, gtp, radius)
        flag = np.zeros(len(det), dtype=bool)
        for di, _ in result.tp_pairs:
            flag[di] = True
        confs.append(det[:, 2])
        flags.append(flag)
    if not confs:
        return np.array([]), np.array([], bool), n_gt
    conf = np.concatenate(confs)
    flag = np.concatenate(flags)
    order = np.argsort(-conf, kind="stable")
    return conf[order], flag[order], n_gt


def _pr_curve(conf: np.ndarray, tp_flag: np.ndarray, n_gt: int,
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, precision, recall) at every unique confidence, sweeping
    the decision threshold downward; fractions in [0, 1]."""
    cum_tp = np.cumsum(tp_flag)
    cum_fp = np.cumsum(~tp_flag)
    # last index of each equal-confidence group = state with all >= tau included
    is_group_end = np.ones(len(conf), dtype=bool)
    is_group_end[:-1] = conf[:-1] != conf[1:]
    idx = np.nonzero(is_group_end)[0]
    precision = cum_tp[idx] / (cum_tp[idx] + cum_fp[idx])
    recall = cum_tp[idx] / n_gt if n_gt > 0 else np.zeros(len(idx))
    return conf[idx], precision, recall


def ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the PR curve with all-point interpolation (the precision
    envelope max over recalls >= r), as a percentage."""
    if len(recall) == 0:
        return 0.0
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    area = 0.0
    for p, r in zip(prec_env, recall):
        area += (r - prev_r) * p
        prev_r = r
    return 100.0 * area


def compute_ap(samples: Sequence[tuple[object, object]],
               radius: float = DEFAULT_MATCH_RADIUS) -> float | None:
    """Average precision over a dataset of (detections, ground_truth) units.

    Detections across all units are pooled and the decision threshold swept
    over the unique confidences; matching is per unit. Returns None when
    there is no ground truth at all (AP undefined).
    """
    conf, flag, n_gt = _ranked_tp_flags(samples, radius)
    if n_gt == 0:
        return None
    if len(conf) == 0:
        return 0.0
    _, precision, recall = _pr_curve(conf, flag, n_gt)
    return ap_from_pr(precision, recall)


def compute_mae(pairs: Sequence[tuple[float, float]]) -> float:
    """Mean absolute error over per-unit (predicted, actual) counts."""
    if len(pairs) == 0:
        raise ValueError("compute_mae needs at least one unit")
    arr = np.asarray(pairs, dtype=float)
    return float(np.mean(np.abs(arr[:, 0] - arr[:, 1])))


def compute_tce(total_predicted: float, total_actual: float) -> float | None:
    """Total counting error: signed percentage deviation of the summed
    prediction from the summed ground truth. None when actual is zero."""
    if total_actual == 0:
        return None
    return 100.0 * (total_predicted - total_actual) / total_actual


def patch_classification_metrics(probabilities, labels, tau: float = 0.5,
                                 ) -> tuple[float, float, float, float | None]:
    """Thresholded precision/recall/F1 plus threshold-free AP for binary
    patch classification. AP is None for single-class label sets."""
    probs = np.asarray(probabilities, dtype=float)
    labs = np.asarray(labels, dtype=int)
    if probs.shape != labs.shape:
        raise ValueError("probabilities and labels must align")
    pred = probs >= tau
    tp = int(np.sum(pred & (labs == 1)))
    fp = int(np.sum(pred & (labs == 0)))
    fn = int(np.sum(~pred & (labs == 1)))
    precision, recall, f1 = prf_from_counts(tp, fp, fn)

    if len(set(labs.tolist())) < 2:
        return precision, recall, f1, None
    order = np.argsort(-probs, kind="stable")
    conf = probs[order]
    flag = labs[order] == 1
    _, curve_p, curve_r = _pr_curve(conf, flag, int(np.sum(labs == 1)))
    return precision, recall, f1, ap_from_pr(curve_p, curve_r)


def count_scatter_r2(pairs: Sequence[tuple[float, float]], mode: str = "identity",
                     ) -> float | None:
    """R2 of per-unit (gt, pred) counts.

    mode="identity" scores predictions against the diagonal pred == gt;
    mode="fitted" scores them against the least-squares line. None when
    fewer than 2 units or the ground truth has no variance.
    """
    arr = np.asarray(pairs, dtype=float)
    if len(arr) < 2:
        return None
    gt, pred = arr[:, 0], arr[:, 1]
    ss_tot = float(np.sum((gt - gt.mean()) ** 2))
    if ss_tot == 0:
        return None
    if mode == "identity":
        ss_res = float(np.sum((pred - gt) ** 2))
    elif mode == "fitted":
        coeffs = np.polyfit(gt, pred, 1)
        fitted = np.polyval(coeffs, gt)
        ss_res = float(np.sum((pred - fitted) ** 2))
        ss_tot = float(np.sum((pred - pred.mean()) ** 2))
        if ss_tot == 0:
            return None
    else:
        raise ValueError(f"unknown r2 mode {mode!r}")
    return 1.0 - ss_res / ss_tot


def bootstrap_ci(values, statistic: Callable = np.mean, n_boot: int = 10_000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for a per-unit statistic.

    Deterministic for a fixed seed. The statistic must reduce a 1-D sample
    to a scalar; vectorized reducers accepting axis= are exploited when
    possible.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or len(arr) < 2:
        raise ValueError("bootstrap_ci needs a 1-D sample with n >= 2")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(arr), size=(n_boot, len(arr)))
    try:
        stats = np.asarray(statistic(arr[idx], axis=1), dtype=float)
        if stats.shape != (n_boot,):
            raise TypeError
    except TypeError:
        stats = np.array([float(statistic(arr[row])) for row in idx])
    lo = (1.0 - level) / 2.0
    return float(np.quantile(stats, lo)), float(np.quantile(stats, 1.0 - lo))


@dataclass
class MetricsReport:
    """Everything one evaluation run reports, percentages for rates."""

    precision: float
    recall: float
    f1: float
    ap: float | None = None
    mae: float | None = None
    tce: float | None = None
    r2: float | None = None
    ci95: dict[str, tuple[float, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ap": self.ap,
            "mae": self.mae,
            "tce": self.tce,
            "r2": self.r2,
            "ci95": {k: list(v) for k, v in self.ci95.items()},
            "meta": self.meta,
        }


def write_metrics_table(path, rows: Sequence[tuple[str, str, "MetricsReport"]]) -> None:
    """CSV with one row per (model, test set), columns in the usual reporting
    order: precision, recall, F1, MAE, AP, TCE."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "test_set", "precision_pct", "recall_pct",
                         "f1_pct", "mae", "ap_pct", "tce_pct"])
        for model, test_set, rep in rows:
            writer.writerow([model, test_set, rep.precision, rep.recall, rep.f1,
                             rep.mae, rep.ap, rep.tce])


def evaluate_detections(samples: Sequence[tuple[object, object]],
                        radius: float = DEFAULT_MATCH_RADIUS,
                        bootstrap_seed: int = 0,
                        n_boot: int = 2_000,
                        ap_interpolation: str = "all_point") -> MetricsReport:
    """Full detection report over (detections, ground_truth) units: pooled
    P/R/F1 at the given radius, AP, per-unit MAE with a bootstrap interval,
    TCE, and identity-line R2 of the count scatter."""
    tp = fp = fn = 0
    count_pairs = []
    for dets, gts in samples:
        res = match_points(dets, gts, radius)
        tp, fp, fn = tp + res.n_tp, fp + res.n_fp, fn + res.n_fn
        count_pairs.append((len(_as_points(gts)), len(_as_detections(dets))))
    precision, recall, f1 = prf_from_counts(tp, fp, fn)
    ap = compute_ap(samples, radius)
    mae_pairs = [(pred, gt) for gt, pred in count_pairs]
    mae = compute_mae(mae_pairs) if mae_pairs else None
    total_pred = sum(p for _, p in count_pairs)
    total_gt = sum(g for g, _ in count_pairs)
    tce = compute_tce(total_pred, total_gt)
    r2 = count_scatter_r2(count_pairs)
    ci = {}
    abs_err = [abs(p - g) for g, p in count_pairs]
    if len(abs_err) >= 2:
        ci["mae"] = bootstrap_ci(abs_err, np.mean, n_boot=n_boot, seed=bootstrap_seed)
    return MetricsReport(precision=precision, recall=recall, f1=f1, ap=ap, mae=mae,
                         tce=tce, r2=r2, ci95=ci,
                         meta={"radius": radius, "n_units": len(count_pairs),
                               "ap_interpolation": ap_interpolation})
