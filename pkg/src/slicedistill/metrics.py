"""Evaluation metrics: AUROC, Dice, HD95, threshold classification
metrics, and the Welch fold-level t-test, plus the per-fold report
container."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats
from scipy.spatial import cKDTree

from .errors import EmptyMask, ShapeMismatch, SingleClass


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    xs = x[order]
    while i < len(x):
        j = i
        while j < len(x) and xs[j] == xs[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 * P(tie).

    Equals the trapezoidal area under the ROC curve.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise ShapeMismatch(f"{s.shape} scores vs {y.shape} labels")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} pos / {n_neg} neg")
    ranks = _midranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def dice(pred, gt, cls: int) -> float:
    """2|A∩B| / (|A|+|B|) for the given class; both empty -> 1.0."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"dice: {p.shape} vs {g.shape}")
    a = p == cls
    b = g == cls
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return float(2.0 * int((a & b).sum()) / total)


def _boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """In-mask voxels with at least one out-of-mask face neighbor
    (4-neighborhood in 2D, 6 in 3D); the array edge counts as outside."""
    m = mask.astype(bool)
    interior = np.ones_like(m)
    for axis in range(m.ndim):
        for shift in (1, -1):
            rolled = np.zeros_like(m)
            src = [slice(None)] * m.ndim
            dst = [slice(None)] * m.ndim
            if shift == 1:
                src[axis] = slice(0, -1)
                dst[axis] = slice(1, None)
            else:
                src[axis] = slice(1, None)
                dst[axis] = slice(0, -1)
            rolled[tuple(dst)] = m[tuple(src)]
            interior &= rolled
    return np.argwhere(m & ~interior)


def hd95(pred, gt, spacing=None) -> float:
    """95th percentile (nearest rank) of the pooled bidirectional
    boundary-to-boundary Euclidean distances, in mm when spacing is
    given. Symmetric by construction; identical masks give 0.0."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"hd95: {p.shape} vs {g.shape}")
    p_any, g_any = bool(p.any()), bool(g.any())
    if not p_any and not g_any:
        return 0.0
    if not p_any or not g_any:
        raise EmptyMask("one mask is empty, surface distance undefined")
    sp = np.ones(p.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    bp = _boundary_voxels(p) * sp
    bg = _boundary_voxels(g) * sp
    d_pg = cKDTree(bg).query(bp)[0]
    d_gp = cKDTree(bp).query(bg)[0]
    pooled = np.sort(np.concatenate([d_pg, d_gp]))
    k = int(np.ceil(0.95 * len(pooled)))
    return float(pooled[k - 1])


def classification_metrics(pred_probs, labels, threshold: float = 0.5) -> dict[str, float]:
    """Accuracy / precision / recall / F1 at a positive-probability
    threshold. Degenerate denominators yield 0 by convention."""
    p = np.asarray(pred_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pred = (p >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + tn) / len(y), "precision": precision,
            "recall": recall, "f1": f1}


def fold_ttest(metrics_a, metrics_b) -> float:
    """Two-sided Welch t-test p-value across fold-level metric values.

    Zero variance in both samples gives p = 1.0 for equal means and
    0.0 otherwise.
    """
    a = np.asarray(metrics_a, dtype=np.float64)
    b = np.asarray(metrics_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 values per sample")
    na, nb = len(a), len(b)
    va, vb = a.var(ddof=1), b.var(ddof=1)
    se2 = va / na + vb / nb
    if se2 == 0.0:
        return 1.0 if a.mean() == b.mean() else 0.0
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    dof = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return float(2.0 * scipy_stats.t.sf(abs(t), dof))


@dataclass
class MetricReport:
    metric: str
    per_fold: list[float]
    mean: float
    std: float
    p_values: dict[str, float] | None = None

    @classmethod
    def from_folds(cls, metric: str, values, p_values=None) -> "MetricReport":
        v = [float(x) for x in values]
        std = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        return cls(metric=metric, per_fold=v, mean=float(np.mean(v)), std=std,
                   p_values=dict(p_values) if p_values else None)

    def to_dict(self) -> dict:
        doc = {"metric": self.metric, "per_fold": self.per_fold,
               "mean": self.mean, "std": self.std}
        if self.p_values:
            doc["p_values"] = self.p_values
        return doc

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def save_fold_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", self.metric])
            for i, v in enumerate(self.per_fold):
                writer.writerow([i, repr(v)])
