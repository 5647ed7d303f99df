"""Detection metrics and analyses over anomaly score sets.

All anomaly scores are oriented "higher = more anomalous"; the outlier class
is the positive class throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class MetricError(Exception):
    pass


@dataclass
class ScoreSet:
    inlier_scores: np.ndarray
    outlier_scores: np.ndarray
    kind: str = "combined"   # recon | latent | grad | combined | layer_i

    def __post_init__(self):
        self.inlier_scores = np.asarray(self.inlier_scores, dtype=np.float64)
        self.outlier_scores = np.asarray(self.outlier_scores, dtype=np.float64)
        if self.inlier_scores.size == 0 or self.outlier_scores.size == 0:
            raise MetricError(f"{self.kind}: empty score list")
        if not (np.isfinite(self.inlier_scores).all()
                and np.isfinite(self.outlier_scores).all()):
            raise MetricError(f"{self.kind}: non-finite scores")


def auroc(scores: ScoreSet) -> float:
    """P(outlier > inlier) + 0.5 * P(tie), via the rank-sum statistic."""
    pooled = np.concatenate([scores.outlier_scores, scores.inlier_scores])
    ranks = rankdata(pooled)
    m = scores.outlier_scores.size
    n = scores.inlier_scores.size
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (m * n))


def f1_max(scores: ScoreSet):
    """Max F1 over thresholds at all unique score midpoints (outlier = positive).

    Predicts outlier when score > threshold; a threshold below the minimum
    (predict everything positive) is included. Returns dict {f1, threshold}.
    """
    pos = scores.outlier_scores
    neg = scores.inlier_scores
    uniq = np.unique(np.concatenate([pos, neg]))
    thresholds = [uniq[0] - 1.0]
    thresholds.extend((uniq[:-1] + uniq[1:]) / 2.0)
    best_f1, best_thr = -1.0, thresholds[0]
    for thr in thresholds:
        tp = int((pos > thr).sum())
        fp = int((neg > thr).sum())
        fn = pos.size - tp
        denom = 2 * tp + fp + fn
        f1 = 2.0 * tp / denom if denom else 0.0
        if f1 > best_f1:
            best_f1, best_thr = f1, thr
    return {"f1": float(best_f1), "threshold": float(best_thr)}


def histogram_overlap(a, b, bins: int = 100) -> float:
    """Percent of pooled samples falling in the overlapped region of the two
    histograms (shared bin edges spanning the pooled min..max).

    Per bin, the overlapped region holds min(count_a, count_b) samples from
    each list, so identical distributions give 100 and disjoint supports 0.
    A degenerate pooled range (all values equal) returns 100 by convention.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise MetricError("histogram_overlap: empty input")
    if bins < 2:
        raise MetricError("histogram_overlap: bins must be >= 2")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return 100.0
    edges = np.linspace(lo, hi, bins + 1)
    ca, _ = np.histogram(a, bins=edges)
    cb, _ = np.histogram(b, bins=edges)
    return float(2.0 * np.minimum(ca, cb).sum() / (a.size + b.size) * 100.0)


def decomposition_report(layer_cos_in, layer_cos_out):
    """AUROC of each decoder layer's -cos score plus the all-layers mean.

    Inputs are (N, n_layers) arrays of per-sample per-layer scores.
    Returns {"layer_0": ..., ..., "all": ...}.
    """
    layer_cos_in = np.asarray(layer_cos_in)
    layer_cos_out = np.asarray(layer_cos_out)
    if layer_cos_in.shape[1] != layer_cos_out.shape[1]:
        raise MetricError("decomposition_report: layer count mismatch")
    report = {}
    for i in range(layer_cos_in.shape[1]):
        report[f"layer_{i}"] = auroc(ScoreSet(layer_cos_in[:, i],
                                              layer_cos_out[:, i], f"layer_{i}"))
    report["all"] = auroc(ScoreSet(layer_cos_in.mean(axis=1),
                                   layer_cos_out.mean(axis=1), "grad"))
    return report


def beta_sweep(recon_in, grad_in, recon_out, grad_out, alpha: float,
               multiples) -> list:
    """AUROC of recon + (m * alpha) * grad for each multiple m, reusing the
    cached per-sample (recon, grad) pairs. Returns [(beta, auroc), ...]."""
    recon_in, grad_in = np.asarray(recon_in), np.asarray(grad_in)
    recon_out, grad_out = np.asarray(recon_out), np.asarray(grad_out)
    rows = []
    for m in multiples:
        beta = float(m) * alpha
        if beta < 0:
            raise MetricError(f"beta multiple {m} gives negative beta")
        rows.append((beta, auroc(ScoreSet(recon_in + beta * grad_in,
                                          recon_out + beta * grad_out, "combined"))))
    return rows
