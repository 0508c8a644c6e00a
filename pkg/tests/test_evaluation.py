import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.linear_model import Ridge
from sklearn.metrics import adjusted_mutual_info_score, mutual_info_score

from moc.core import BoundingBox, DetectedObject
from moc.evaluation import (
    DetectionMatchConfig,
    EncodingSample,
    MetricsReport,
    adjusted_mutual_information,
    ami_of_encodings,
    average_precision,
    evaluate_detections,
    f_score,
    few_shot_protocol,
    fit_ridge,
    interpolated_ap,
    kmeans,
    label_detections,
    match_counts,
    mutual_information,
    precision_recall,
    ridge_few_shot,
    trace_csv,
)
from moc.synthgen import GroundTruthObject


def _b(x, y, w=0.1, h=0.1):
    return BoundingBox(x, y, x + w, y + h)


def _det(box, pres=0.9, enc=(1.0, 0.0)):
    return DetectedObject(0, box, np.asarray(enc, dtype=float), pres)


# --- precision / recall ---------------------------------------------------------


def test_precision_recall_examples():
    gts = [_b(0.1 * i, 0.1 * i) for i in range(4)]
    assert precision_recall(gts, gts) == (1.0, 1.0)
    assert precision_recall(gts[:2], gts) == (1.0, 0.5)
    assert precision_recall([], []) == (1.0, 1.0)
    assert precision_recall([], gts) == (0.0, 0.0)


def test_twice_matched_detection_is_counted_once():
    gt = [_b(0.5, 0.5)]
    p, r = precision_recall([_b(0.5, 0.5), _b(0.51, 0.5)], gt)
    assert (p, r) == (0.5, 1.0)


def test_irrelevant_objects_are_dropped_with_their_detections():
    gt = [GroundTruthObject(_b(0.1, 0.1), 0), GroundTruthObject(_b(0.7, 0.7), 5, relevant=False)]
    dets = [_b(0.1, 0.1), _b(0.7, 0.7)]
    assert precision_recall(dets, gt) == (1.0, 1.0)
    assert precision_recall(dets, gt, all_objects=True) == (1.0, 1.0)
    assert precision_recall(dets[:1], gt, all_objects=True) == (1.0, 0.5)


def _optimal_hits(preds, gts, cfg):
    ok = [[cfg.quality(p, g) is not None for g in gts] for p in preds]
    best = 0
    small, big = (preds, gts) if len(preds) <= len(gts) else (gts, preds)
    for perm in itertools.permutations(range(len(big)), len(small)):
        if len(preds) <= len(gts):
            hits = sum(ok[i][j] for i, j in enumerate(perm))
        else:
            hits = sum(ok[j][i] for i, j in enumerate(perm))
        best = max(best, hits)
    return best


@given(st.integers(0, 10**9), st.sampled_from(["center_divergence", "iou"]))
def test_hit_counts_match_exhaustive_assignment(seed, criterion):
    rng = np.random.default_rng(seed)
    cfg = DetectionMatchConfig(criterion, 0.5 if criterion == "center_divergence" else 0.3)
    gts = [_b(*rng.uniform(0, 0.7, 2), *rng.uniform(0.05, 0.3, 2)) for _ in range(rng.integers(0, 7))]
    preds = [_b(*rng.uniform(0, 0.7, 2), *rng.uniform(0.05, 0.3, 2)) for _ in range(rng.integers(0, 7))]
    c = match_counts(preds, gts, cfg)
    assert c.hits == _optimal_hits(preds, gts, cfg) <= min(len(preds), len(gts))


def test_f_score_examples():
    assert f_score(1, 1) == 1
    assert f_score(1, 0.5) == pytest.approx(2 / 3)
    assert f_score(0, 0.7) == 0 and f_score(0, 0) == 0


@given(st.floats(0, 1), st.floats(0, 1))
def test_f_score_bounds(p, r):
    f = f_score(p, r)
    assert f == pytest.approx(f_score(r, p))
    assert 0 <= f <= (p + r) / 2 + 1e-12 and f <= max(p, r) + 1e-12


def test_match_config_validation():
    with pytest.raises(ValueError):
        DetectionMatchConfig("giou")
    with pytest.raises(ValueError):
        DetectionMatchConfig(threshold=0)
    assert DetectionMatchConfig("cd").criterion == "center_divergence"


# --- AP -------------------------------------------------------------------------------


def test_ap_examples():
    gts = [[_b(0.1, 0.1), _b(0.5, 0.5)]]
    assert average_precision([[_det(g) for g in gts[0]]], gts) == pytest.approx(1.0)
    assert average_precision([[]], gts) == 0.0
    assert average_precision([[]], [[]]) == 0.0


def test_ap_three_detection_staircase():
    gts = [[_b(0.1, 0.1), _b(0.5, 0.5)]]
    dets = [[_det(_b(0.1, 0.1), 0.9), _det(_b(0.8, 0.8), 0.8), _det(_b(0.5, 0.5), 0.7)]]
    # ranked: hit, miss, hit -> (P, R) = (1, .5), (.5, .5), (2/3, 1)
    want = (6 * 1.0 + 5 * (2 / 3)) / 11
    assert interpolated_ap([1, 0.5, 2 / 3], [0.5, 0.5, 1.0]) == pytest.approx(want)
    assert average_precision(dets, gts) == pytest.approx(want)


# --- mutual information -----------------------------------------------------------------


def _mi_loop(a, b):
    n = len(a)
    total = 0.0
    for x in set(a):
        for y in set(b):
            nxy = sum(1 for i in range(n) if a[i] == x and b[i] == y)
            if nxy:
                px, py = a.count(x) / n, b.count(y) / n
                total += nxy / n * math.log((nxy / n) / (px * py))
    return total


def test_mi_examples():
    c = [0, 1] * 10
    assert mutual_information(c, c) == pytest.approx(math.log(2), abs=1e-12)
    assert mutual_information([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=1, max_size=40))
def test_mi_matches_loop_and_sklearn(pairs):
    a, b = [p[0] for p in pairs], [p[1] for p in pairs]
    mi = mutual_information(a, b)
    assert mi == pytest.approx(_mi_loop(a, b), abs=1e-12)
    assert mi == pytest.approx(mutual_info_score(a, b), abs=1e-12)


def test_ami_examples():
    c = [0, 0, 1, 1, 2, 2]
    assert adjusted_mutual_information(c, c) == pytest.approx(1.0)
    assert adjusted_mutual_information(c, [5, 5, 3, 3, 9, 9]) == pytest.approx(1.0)
    assert adjusted_mutual_information([0, 0, 0], [1, 1, 1]) == 1.0
    assert adjusted_mutual_information([0, 0, 0], [1, 2, 3]) == pytest.approx(0.0, abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=50), st.sampled_from(["max", "arithmetic"]))
def test_ami_matches_sklearn(pairs, average):
    a, b = [p[0] for p in pairs], [p[1] for p in pairs]
    got = adjusted_mutual_information(a, b, "mean" if average == "arithmetic" else "max")
    assert got == pytest.approx(adjusted_mutual_info_score(a, b, average_method=average), abs=1e-9)


@given(st.permutations([0, 1, 2]), st.lists(st.integers(0, 2), min_size=3, max_size=30))
def test_ami_label_permutation_invariance(perm, c):
    d = [(x * 7 + 3) % 4 for x in c]
    assert adjusted_mutual_information([perm[x] for x in c], d) == pytest.approx(adjusted_mutual_information(c, d), abs=1e-12)


def test_ami_random_labelings_center_on_zero():
    rng = np.random.default_rng(0)
    vals = [adjusted_mutual_information(rng.integers(0, 3, 60), rng.integers(0, 3, 60)) for _ in range(100)]
    assert abs(np.mean(vals)) <= 0.05


# --- k-means and encodings -------------------------------------------------------------


def test_kmeans_separated_blobs(rng):
    centers = np.array([[0, 0], [10, 0], [0, 10]])
    truth = np.repeat(np.arange(3), 20)
    x = centers[truth] + rng.normal(scale=0.1, size=(60, 2))
    labels = kmeans(x, 3, seed=1)
    assert adjusted_mutual_information(truth, labels) == pytest.approx(1.0)
    np.testing.assert_array_equal(labels, kmeans(x, 3, seed=1))


def test_kmeans_single_cluster_and_errors(rng):
    x = rng.normal(size=(10, 3))
    assert (kmeans(x, 1) == 0).all()
    with pytest.raises(ValueError):
        kmeans(x, 11)
    with pytest.raises(ValueError):
        kmeans(x[0], 1)


def test_ami_of_encodings_examples():
    onehot = [EncodingSample(np.eye(3)[c], c) for c in [0, 1, 2] * 5]
    assert ami_of_encodings(onehot) == pytest.approx(1.0)
    same = [EncodingSample(np.ones(3), c) for c in [0, 1, 2] * 5]
    assert ami_of_encodings(same) <= 1e-9
    assert ami_of_encodings([]) == 0.0


# --- ridge -------------------------------------------------------------------------------


def test_ridge_orthogonal_codes_one_shot():
    x = np.eye(4)
    assert ridge_few_shot(x, [0, 1, 2, 3], x, [0, 1, 2, 3]) == 1.0


def test_ridge_requires_balanced_classes():
    with pytest.raises(ValueError):
        ridge_few_shot(np.eye(3), [0, 0, 1], np.eye(3), [0, 1, 1])
    with pytest.raises(ValueError):
        fit_ridge(np.eye(2), [0, 1], alpha=0.0)


@given(st.integers(0, 10**6))
def test_ridge_weights_match_normal_equations_and_sklearn(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(12, 5)), rng.integers(0, 3, 12)
    y[:3] = [0, 1, 2]
    model = fit_ridge(x, y, 0.7)
    onehot = (y[:, None] == np.arange(3)).astype(float)
    xa = np.hstack([x, np.ones((12, 1))])
    # penalize weights but not the intercept
    pen = np.diag([0.7] * 5 + [0.0])
    full = np.linalg.solve(xa.T @ xa + pen, xa.T @ onehot)
    np.testing.assert_allclose(model.weights, full[:5], atol=1e-8)
    np.testing.assert_allclose(model.intercept, full[5], atol=1e-8)
    sk = Ridge(alpha=0.7).fit(x, onehot)
    np.testing.assert_allclose(model.weights, sk.coef_.T, atol=1e-8)


@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_ridge_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(8, 3)), np.repeat([0, 1], 4)
    t = rng.normal(size=(10, 3))
    a = fit_ridge(x, y).predict(t)
    b = fit_ridge(x + shift, y).predict(t + shift)
    np.testing.assert_array_equal(a, b)


def test_ridge_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    accs = []
    for _ in range(200):
        x = rng.normal(size=(40, 4))
        y = rng.permutation(np.repeat([0, 1], 20))
        accs.append(ridge_few_shot(x[:8], np.repeat([0, 1], 4), x[8:], y[8:]))
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_few_shot_protocol_counts_missing_classes_as_errors():
    train = [EncodingSample(np.array([1.0, 0.0]), 0), EncodingSample(np.array([0.0, 1.0]), 1)]
    test = [EncodingSample(np.array([1.0, 0.0]), 0), EncodingSample(np.array([0.0, 1.0]), 1), EncodingSample(np.array([1.0, 1.0]), 2)]
    out = few_shot_protocol(train, test, [0, 1, 2], sizes=(1, 4))
    assert out[1] == pytest.approx(2 / 3) and out[4] == 0.0


# --- pipeline pieces ---------------------------------------------------------------------


def test_label_detections_and_report():
    gt = [GroundTruthObject(_b(0.1, 0.1), 0), GroundTruthObject(_b(0.6, 0.6), 1)]
    dets = [_det(_b(0.1, 0.1), enc=(1, 0)), _det(_b(0.6, 0.6), enc=(0, 1)), _det(_b(0.35, 0.95, 0.02, 0.02), enc=(1, 1))]
    labels = [s.label for s in label_detections(dets, gt)]
    assert labels == [0, 1, -1]
    report = evaluate_detections([dets, dets], [gt, gt], [0, 1], few_shot_sizes=(1,))
    d = report.as_dict()
    assert d["precision"] == pytest.approx(2 / 3) and d["recall"] == 1.0
    assert -1 <= d["ami"] <= 1 and set(d["few_shot"]) == {"n1"}
    assert isinstance(report, MetricsReport)


def test_trace_csv_layout():
    text = trace_csv([{"step": 200, "f_score": 0.5, "few_shot": {"n1": 0.3}}])
    assert text.splitlines()[0] == "step,f_score,precision,recall,ap,ami,n1,n4,n16,n64"
    assert text.splitlines()[1].startswith("200,0.5,")
