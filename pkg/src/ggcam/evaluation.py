"""Classification and interpretability metrics, CAM statistics and one-way ANOVA."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy import special, stats

from .dataset import CLASS_MASK, DataError, Dataset
from .network import Classifier, class_maps

logger = logging.getLogger(__name__)

__all__ = [
    "auc_multiclass",
    "pairwise_auc",
    "precision_recall",
    "confusion_matrix",
    "downscale_mask",
    "interpretability",
    "interpretability_rate",
    "peak_in_mask_rate",
    "CamStats",
    "cam_element_stats",
    "anova_oneway",
    "DegenerateVarianceError",
]


class DegenerateVarianceError(ValueError):
    """All groups have zero within-group variance; the F ratio is undefined."""


def _prob_matrix(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ValueError("expected probs N×C and N labels")
    if len(y) == 0:
        raise ValueError("no predictions")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise ValueError("label out of range")
    return p, y


def _a_given(scores_i: np.ndarray, scores_j: np.ndarray) -> float:
    """Probability that a class-i sample outscores a class-j sample on class-i score, ties count half."""
    n_i, n_j = len(scores_i), len(scores_j)
    ranks = stats.rankdata(np.concatenate([scores_i, scores_j]))
    return float((ranks[:n_i].sum() - n_i * (n_i + 1) / 2.0) / (n_i * n_j))


def pairwise_auc(probs, labels, i: int, j: int) -> float:
    """Symmetrized one-vs-one separability of classes i and j."""
    p, y = _prob_matrix(probs, labels)
    in_i, in_j = y == i, y == j
    if not in_i.any() or not in_j.any():
        raise ValueError(f"class {i if not in_i.any() else j} absent")
    return 0.5 * (_a_given(p[in_i, i], p[in_j, i]) + _a_given(p[in_j, j], p[in_i, j]))


def auc_multiclass(probs, labels) -> float:
    """Multi-class AUC: mean of the pairwise one-vs-one AUCs over all class pairs.

    Pairs with an absent class are skipped with a warning.
    """
    p, y = _prob_matrix(probs, labels)
    values = []
    for i, j in combinations(range(p.shape[1]), 2):
        if not (y == i).any() or not (y == j).any():
            logger.warning("class pair (%d, %d) skipped: a class is absent", i, j)
            continue
        values.append(pairwise_auc(p, y, i, j))
    if not values:
        raise ValueError("fewer than two classes present")
    return float(np.mean(values))


def confusion_matrix(probs, labels) -> np.ndarray:
    """Rows are true classes, columns predicted (argmax, first index wins ties)."""
    p, y = _prob_matrix(probs, labels)
    pred = p.argmax(axis=1)
    cm = np.zeros((p.shape[1], p.shape[1]), dtype=np.int64)
    np.add.at(cm, (y, pred), 1)
    return cm


def precision_recall(probs, labels) -> tuple[list[float | None], list[float | None]]:
    """Per-class precision and recall; ``None`` where the denominator is zero."""
    cm = confusion_matrix(probs, labels)
    tp = np.diag(cm)
    predicted, actual = cm.sum(axis=0), cm.sum(axis=1)
    precision = [float(tp[c] / predicted[c]) if predicted[c] else None for c in range(len(tp))]
    recall = [float(tp[c] / actual[c]) if actual[c] else None for c in range(len(tp))]
    return precision, recall


def downscale_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """A grid cell is set if any source pixel mapping into it is set."""
    mask = np.asarray(mask, dtype=bool)
    h0, w0 = mask.shape
    h, w = shape
    rows, cols = np.nonzero(mask)
    out = np.zeros((h, w), dtype=bool)
    out[(rows * h) // h0, (cols * w) // w0] = True
    return out


def interpretability(cam_map: np.ndarray, mask: np.ndarray) -> bool:
    """True when the (first row-major) peak of the class map lies in the downscaled mask."""
    cam_map = np.asarray(cam_map)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty segmentation mask")
    small = downscale_mask(mask, cam_map.shape)
    peak = np.unravel_index(int(np.argmax(cam_map)), cam_map.shape)
    return bool(small[peak])


def peak_in_mask_rate(cams: np.ndarray, masks: np.ndarray) -> float:
    """Fraction of class maps (N×H×W) whose peak falls in the matching mask (N×H0×W0)."""
    cams = np.asarray(cams)
    if len(cams) == 0:
        raise ValueError("no samples of the requested class")
    if len(masks) != len(cams):
        raise ValueError("one mask per class map required")
    return float(np.mean([interpretability(c, m) for c, m in zip(cams, masks)]))


def interpretability_rate(classifier: Classifier, dataset: Dataset, label: int) -> float:
    """Share of samples of true class ``label`` whose class-``label`` map peaks inside that class's mask.

    Every sample of the class counts, whether or not it was classified correctly.
    """
    name = CLASS_MASK.get(label)
    if name is None or name not in dataset.masks:
        raise DataError(f"no segmentation mask for class {label}")
    idx = np.flatnonzero(dataset.labels == label)
    if idx.size == 0:
        raise ValueError(f"no samples of class {label}")
    maps = class_maps(classifier, dataset.images[idx])[:, label]
    return peak_in_mask_rate(maps, dataset.masks[name][idx])


@dataclass
class CamStats:
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    median: float
    mode: float
    std: float
    n: int


def cam_element_stats(cams, bins: int = 50) -> CamStats:
    """Histogram and summary of all CAM elements pooled together.

    ``mode`` is the centre of the fullest histogram bin. Counts can be plotted on
    a log axis directly (empty bins stay zero).
    """
    values = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in cams]) if len(cams) else np.array([])
    if values.size == 0:
        raise ValueError("no CAM elements")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        counts = np.array([values.size])
        edges = np.array([lo, hi])
        mode = lo
    else:
        counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
        k = int(np.argmax(counts))
        mode = float(0.5 * (edges[k] + edges[k + 1]))
    return CamStats(counts, edges, float(values.mean()), float(np.median(values)), mode, float(values.std()), values.size)


def anova_oneway(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """One-way ANOVA F statistic and its upper-tail p-value."""
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise ValueError("need at least two groups")
    if any(a.size < 2 for a in arrays):
        raise ValueError("every group needs at least two values")
    k = len(arrays)
    n = sum(a.size for a in arrays)
    grand = np.concatenate(arrays).mean()
    ss_between = sum(a.size * (a.mean() - grand) ** 2 for a in arrays)
    ss_within = sum(((a - a.mean()) ** 2).sum() for a in arrays)
    if ss_within <= 0:
        raise DegenerateVarianceError("zero within-group variance")
    df_b, df_w = k - 1, n - k
    f = float((ss_between / df_b) / (ss_within / df_w))
    return f, f_survival(f, df_b, df_w)


def f_survival(f: float, df1: float, df2: float) -> float:
    """P(F > f) for an F(df1, df2) variable, via the regularized incomplete beta function."""
    if f <= 0:
        return 1.0
    x = df2 / (df2 + df1 * f)
    return float(special.betainc(df2 / 2.0, df1 / 2.0, x))
