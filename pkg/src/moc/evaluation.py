"""Detection and representation metrics.

Detection quality: precision, recall and F-score under center divergence or
IoU, plus 11-point interpolated AP. Encoding quality: AMI between k-means
clusters and ground-truth classes, and a ridge-regression few-shot probe.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

from .core import BoundingBox, DetectedObject, InvalidGroundTruth, center_divergence, iou

NO_LABEL = -1
AP_IOU_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 11))
RECALL_LEVELS = np.linspace(0.0, 1.0, 11)
FEW_SHOT_SIZES = (1, 4, 16, 64)


@dataclass(frozen=True)
class DetectionMatchConfig:
    criterion: str = "center_divergence"
    threshold: float = 0.5

    def __post_init__(self):
        aliases = {"cd": "center_divergence", "iou": "iou"}
        object.__setattr__(self, "criterion", aliases.get(self.criterion, self.criterion))
        if self.criterion not in ("center_divergence", "iou"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")

    def quality(self, pred: BoundingBox, gt: BoundingBox) -> float | None:
        """Match quality in [0, 1] (higher is better), or None if the pair fails the threshold."""
        if self.criterion == "iou":
            v = iou(pred, gt)
            return v if v >= self.threshold else None
        try:
            d = center_divergence(pred, gt)
        except InvalidGroundTruth:
            return None
        return 1.0 - d / self.threshold if d <= self.threshold else None


@dataclass(frozen=True)
class EncodingSample:
    enc: np.ndarray
    label: int = NO_LABEL


@dataclass(frozen=True)
class MatchCounts:
    hits: int
    detections: int
    ground_truth: int

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.hits + other.hits, self.detections + other.detections, self.ground_truth + other.ground_truth)

    @property
    def precision(self) -> float:
        if self.detections == 0:
            return 1.0 if self.ground_truth == 0 else 0.0
        return self.hits / self.detections

    @property
    def recall(self) -> float:
        return 1.0 if self.ground_truth == 0 else self.hits / self.ground_truth


def _box(x) -> BoundingBox:
    return x if isinstance(x, BoundingBox) else x.box


def _is_relevant(x) -> bool:
    return getattr(x, "relevant", True)


def _quality_matrix(preds: Sequence[BoundingBox], gts: Sequence[BoundingBox], cfg: DetectionMatchConfig) -> np.ndarray:
    """Qualities with NaN marking pairs that fail the threshold."""
    q = np.full((len(preds), len(gts)), np.nan)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            v = cfg.quality(p, g)
            if v is not None:
                q[i, j] = v
    return q


def max_hits_assignment(q: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one pairs maximizing the number of valid matches, then total quality."""
    if q.size == 0:
        return []
    valid = ~np.isnan(q)
    if not valid.any():
        return []
    # each hit is worth 1; quality can add at most eps per hit, so it only breaks ties
    eps = 1.0 / (min(q.shape) + 1)
    gain = np.where(valid, 1.0 + eps * np.nan_to_num(q), 0.0)
    rows, cols = linear_sum_assignment(gain, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if valid[r, c]]


def match_counts(
    detections: Sequence, ground_truth: Sequence, config: DetectionMatchConfig = DetectionMatchConfig(), all_objects: bool = False
) -> MatchCounts:
    """Hit counts for one frame.

    Irrelevant ground truth is removed unless ``all_objects``; detections
    that can only match irrelevant objects are removed with it.
    """
    preds = [_box(d) for d in detections]
    relevant = [g for g in ground_truth if all_objects or _is_relevant(g)]
    ignored = [g for g in ground_truth if not (all_objects or _is_relevant(g))]
    q = _quality_matrix(preds, [_box(g) for g in relevant], config)
    if ignored:
        q_ign = _quality_matrix(preds, [_box(g) for g in ignored], config)
        keep = [i for i in range(len(preds)) if (~np.isnan(q[i])).any() or np.isnan(q_ign[i]).all()]
        q = q[keep]
    pairs = max_hits_assignment(q)
    return MatchCounts(len(pairs), q.shape[0], len(relevant))


def precision_recall(
    detections: Sequence, ground_truth: Sequence, config: DetectionMatchConfig = DetectionMatchConfig(), all_objects: bool = False
) -> tuple[float, float]:
    c = match_counts(detections, ground_truth, config, all_objects)
    return c.precision, c.recall


def f_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def detection_scores(
    per_frame_dets: Iterable[Sequence], per_frame_gt: Iterable[Sequence], config: DetectionMatchConfig = DetectionMatchConfig(), all_objects: bool = False
) -> dict:
    """Precision, recall and F-score pooled over frames."""
    total = MatchCounts(0, 0, 0)
    for dets, gts in zip(per_frame_dets, per_frame_gt):
        total = total + match_counts(dets, gts, config, all_objects)
    p, r = total.precision, total.recall
    return {"precision": p, "recall": r, "f_score": f_score(p, r), "hits": total.hits, "detections": total.detections, "ground_truth": total.ground_truth}


# --- average precision -------------------------------------------------------


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """11-point interpolated AP of one precision/recall staircase."""
    precision, recall = np.asarray(precision, dtype=float), np.asarray(recall, dtype=float)
    total = 0.0
    for r in RECALL_LEVELS:
        above = precision[recall >= r - 1e-12]
        total += above.max() if above.size else 0.0
    return total / len(RECALL_LEVELS)


def _pr_curve(per_frame_dets, per_frame_gt, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    scored = []
    for f, dets in enumerate(per_frame_dets):
        for d in dets:
            scored.append((-float(getattr(d, "pres", 1.0)), f, _box(d)))
    scored.sort(key=lambda s: (s[0], s[1]))
    n_gt = sum(len(g) for g in per_frame_gt)
    claimed = [np.zeros(len(g), dtype=bool) for g in per_frame_gt]
    tp = np.zeros(len(scored))
    for i, (_, f, box) in enumerate(scored):
        best, best_j = -1.0, -1
        for j, g in enumerate(per_frame_gt[f]):
            v = iou(box, _box(g))
            if v >= threshold and not claimed[f][j] and v > best:
                best, best_j = v, j
        if best_j >= 0:
            claimed[f][best_j] = True
            tp[i] = 1
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(scored) + 1)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    return precision, recall


def average_precision(
    per_frame_dets: Sequence[Sequence], per_frame_gt: Sequence[Sequence], thresholds: Sequence[float] = AP_IOU_THRESHOLDS, all_objects: bool = False
) -> float:
    """11-point AP averaged over IoU thresholds; detections ranked by ``pres``.

    Detections are claimed greedily in order of confidence by the unclaimed
    ground truth with the largest IoU at or above the threshold.
    """
    gts = [[g for g in frame if all_objects or _is_relevant(g)] for frame in per_frame_gt]
    if sum(len(g) for g in gts) == 0:
        return 0.0
    dets = list(per_frame_dets)
    return float(np.mean([interpolated_ap(*_pr_curve(dets, gts, t)) for t in thresholds]))


# --- clustering metrics ------------------------------------------------------


def _contingency(c1, c2) -> np.ndarray:
    c1, c2 = np.asarray(c1), np.asarray(c2)
    if c1.shape != c2.shape or c1.ndim != 1:
        raise ValueError("cluster assignments must be 1-d and of equal length")
    _, a = np.unique(c1, return_inverse=True)
    _, b = np.unique(c2, return_inverse=True)
    table = np.zeros((a.max(initial=-1) + 1, b.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def entropy(c) -> float:
    _, counts = np.unique(np.asarray(c), return_counts=True)
    if counts.sum() == 0:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def _mi_from_table(table: np.ndarray) -> float:
    n = table.sum()
    if n == 0:
        return 0.0
    rows, cols = np.nonzero(table)
    nij = table[rows, cols].astype(float)
    a = table.sum(axis=1)[rows].astype(float)
    b = table.sum(axis=0)[cols].astype(float)
    return max(float((nij / n * (np.log(nij) + math.log(n) - np.log(a) - np.log(b))).sum()), 0.0)


def mutual_information(c1, c2) -> float:
    """Empirical mutual information in nats."""
    return _mi_from_table(_contingency(c1, c2))


def expected_mutual_information(table: np.ndarray) -> float:
    """E[MI] under the hypergeometric model with the table's marginals."""
    n = int(table.sum())
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    if n <= 1:
        return 0.0
    emi = 0.0
    lg_n = gammaln(n + 1)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=float)
            term = nij / n * (np.log(n * nij) - math.log(ai * bj))
            log_p = (
                gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                - lg_n - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                - gammaln(n - ai - bj + nij + 1)
            )
            emi += float((term * np.exp(log_p)).sum())
    return emi


def same_partition(c1, c2) -> bool:
    table = _contingency(c1, c2)
    return bool(((table > 0).sum(axis=1) == 1).all() and ((table > 0).sum(axis=0) == 1).all())


def adjusted_mutual_information(c1, c2, average: str = "max") -> float:
    """MI corrected for chance and normalized by the larger (or mean) entropy."""
    table = _contingency(c1, c2)
    if table.shape[0] == table.shape[1] <= 1:
        return 1.0
    mi = _mi_from_table(table)
    emi = expected_mutual_information(table)
    h1, h2 = entropy(c1), entropy(c2)
    if average == "max":
        norm = max(h1, h2)
    elif average in ("mean", "arithmetic"):
        norm = 0.5 * (h1 + h2)
    else:
        raise ValueError(f"unknown normalization {average!r}")
    denom = norm - emi
    if abs(denom) < np.finfo(float).eps:
        return 1.0 if same_partition(c1, c2) else 0.0
    return float((mi - emi) / denom)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(x, k: int, seed: int = 0, max_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm from a seeded k-means++ start; returns assignments."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("encodings must be a 2-d array")
    if k < 1 or len(x) < k:
        raise ValueError(f"need 1 <= k <= #points, got k={k} with {len(x)} points")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        new = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = int(d2[np.arange(len(x)), labels].argmax())
                centers[c] = x[far]
                labels[far] = c
    return labels


def ami_of_encodings(samples: Sequence[EncodingSample], seed: int = 0, average: str = "max") -> float:
    """AMI between k-means clusters of the encodings and their classes (k = #classes)."""
    if not samples:
        return 0.0
    x = np.array([np.asarray(s.enc, dtype=float) for s in samples])
    y = np.array([s.label for s in samples])
    k = len(np.unique(y))
    return adjusted_mutual_information(y, kmeans(x, k, seed), average)


# --- few-shot probe ----------------------------------------------------------


@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray
    intercept: np.ndarray
    classes: np.ndarray

    def scores(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.weights + self.intercept

    def predict(self, x) -> np.ndarray:
        return self.classes[self.scores(x).argmax(axis=1)]


def fit_ridge(x, y, alpha: float = 1.0) -> RidgeModel:
    """Closed-form ridge on one-hot targets; the intercept is handled by centering."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    classes = np.unique(y)
    onehot = (y[:, None] == classes[None, :]).astype(float)
    x_mean, y_mean = x.mean(axis=0), onehot.mean(axis=0)
    xc, yc = x - x_mean, onehot - y_mean
    w = np.linalg.solve(xc.T @ xc + alpha * np.eye(x.shape[1]), xc.T @ yc)
    return RidgeModel(w, y_mean - x_mean @ w, classes)


def ridge_few_shot(train_x, train_y, test_x, test_y, alpha: float = 1.0) -> float:
    train_y = np.asarray(train_y)
    _, counts = np.unique(train_y, return_counts=True)
    if len(counts) == 0 or (counts != counts[0]).any():
        raise ValueError("every class needs the same number of training samples")
    test_y = np.asarray(test_y)
    if len(test_y) == 0:
        return 0.0
    model = fit_ridge(train_x, train_y, alpha)
    return float((model.predict(test_x) == test_y).mean())


def few_shot_protocol(
    train_pool: Sequence[EncodingSample],
    test_pool: Sequence[EncodingSample],
    classes: Sequence[int],
    sizes: Sequence[int] = FEW_SHOT_SIZES,
    seed: int = 0,
    alpha: float = 1.0,
) -> dict[int, float]:
    """Accuracy per shot count ``n``.

    Classes with fewer than ``n`` labelled training samples are left out of
    the fit and their test samples count as errors. With no usable class or
    no labelled test sample the accuracy is 0.
    """
    rng = np.random.default_rng(seed)
    by_class = {c: [s for s in train_pool if s.label == c] for c in classes}
    order = {c: rng.permutation(len(v)) for c, v in by_class.items()}
    test = [s for s in test_pool if s.label in set(classes)]
    out = {}
    for n in sizes:
        usable = [c for c in classes if len(by_class[c]) >= n]
        if not usable or not test:
            out[n] = 0.0
            continue
        chosen = [by_class[c][i] for c in usable for i in order[c][:n]]
        tx = np.array([s.enc for s in test], dtype=float)
        ty = np.array([s.label for s in test])
        if len(usable) == 1:
            out[n] = float((ty == usable[0]).mean())
            continue
        model = fit_ridge(np.array([s.enc for s in chosen]), np.array([s.label for s in chosen]), alpha)
        out[n] = float((model.predict(tx) == ty).mean())
    return out


def label_detections(
    detections: Sequence[DetectedObject], ground_truth: Sequence, config: DetectionMatchConfig = DetectionMatchConfig(), all_objects: bool = False
) -> list[EncodingSample]:
    """Each detection takes the class of its best-matching ground truth, else no label."""
    gts = [g for g in ground_truth if all_objects or _is_relevant(g)]
    q = _quality_matrix([_box(d) for d in detections], [_box(g) for g in gts], config)
    samples = []
    for i, d in enumerate(detections):
        row = q[i]
        label = NO_LABEL if np.isnan(row).all() else gts[int(np.nanargmax(row))].class_id
        samples.append(EncodingSample(np.asarray(d.enc, dtype=float), label))
    return samples


# --- reports -----------------------------------------------------------------


@dataclass
class MetricsReport:
    f_score: float
    precision: float
    recall: float
    ap: float
    ami: float
    few_shot: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "f_score": self.f_score,
            "precision": self.precision,
            "recall": self.recall,
            "ap": self.ap,
            "ami": self.ami,
            "few_shot": {f"n{k}": v for k, v in sorted(self.few_shot.items())},
        }
        out.update(self.extra)
        return out


def evaluate_detections(
    per_frame_dets: Sequence[Sequence[DetectedObject]],
    per_frame_gt: Sequence[Sequence],
    classes: Sequence[int],
    config: DetectionMatchConfig = DetectionMatchConfig(),
    all_objects: bool = False,
    seed: int = 0,
    few_shot_sizes: Sequence[int] = FEW_SHOT_SIZES,
    with_ap: bool = True,
    ami_average: str = "max",
    ridge_alpha: float = 1.0,
) -> MetricsReport:
    """Full metric suite. Few-shot pools are the first and second half of the frames."""
    scores = detection_scores(per_frame_dets, per_frame_gt, config, all_objects)
    ap = average_precision(per_frame_dets, per_frame_gt, all_objects=all_objects) if with_ap else float("nan")
    samples = [label_detections(d, g, config, all_objects) for d, g in zip(per_frame_dets, per_frame_gt)]
    flat = [s for frame in samples for s in frame]
    ami = ami_of_encodings(flat, seed, ami_average)
    half = len(samples) // 2
    train_pool = [s for frame in samples[:half] for s in frame]
    test_pool = [s for frame in samples[half:] for s in frame]
    few = few_shot_protocol(train_pool, test_pool, classes, few_shot_sizes, seed, ridge_alpha)
    extra = {k: scores[k] for k in ("hits", "detections", "ground_truth")}
    extra["samples"] = len(flat)
    return MetricsReport(scores["f_score"], scores["precision"], scores["recall"], ap, ami, few, extra)


CSV_FIELDS = ("step", "f_score", "precision", "recall", "ap", "ami", "n1", "n4", "n16", "n64")


def trace_csv(rows: Iterable[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        flat = dict(row)
        for k, v in dict(row.get("few_shot", {})).items():
            flat[k] = v
        writer.writerow(flat)
    return buf.getvalue()
