import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multistage.data import cifar_shaped_labels
from multistage.evalbench import (
    DetectionSet, MetricReport, ProbeProtocol, accuracy, ap50, fpr_at_recall, linear_probe, log_average_mr,
    mean_per_class, miou, mr_at_fppi, n_way_k_shot_split, percentage_shot_split, read_reports, rmse_depth,
    write_reports,
)


# -- oracles ---------------------------------------------------------------------------------------

def brute_fpr_at_recall(scores, labels, r):
    out = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if not pos.any():
            continue
        best = math.inf
        for t in list(scores[:, c]) + [-math.inf]:
            pred = scores[:, c] >= t
            rec = (pred & pos).sum() / pos.sum()
            fpr = (pred & ~pos).sum() / max(1, (~pos).sum())
            if rec >= r - 1e-12:
                best = min(best, fpr)
        out.append(best)
    return float(np.mean(out))


def brute_match(dets):
    """Plain loops over detections in (score desc, image, box) order."""
    order = sorted(((-s, i, tuple(b)) for i in range(dets.num_images)
                    for b, s in zip(dets.pred_boxes[i], dets.scores[i])))
    used = [set() for _ in range(dets.num_images)]
    res = []
    for neg_s, i, box in order:
        best, bj = -1.0, None
        for j, g in enumerate(dets.gt_boxes[i]):
            if j in used[i]:
                continue
            ix = max(0.0, min(box[2], g[2]) - max(box[0], g[0]))
            iy = max(0.0, min(box[3], g[3]) - max(box[1], g[1]))
            inter = ix * iy
            union = (box[2] - box[0]) * (box[3] - box[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter
            iou = inter / union if union > 0 else 0.0
            if iou > best:
                best, bj = iou, j
        hit = bj is not None and best >= 0.5
        if hit:
            used[i].add(bj)
        res.append((-neg_s, hit))
    return res, sum(len(g) for g in dets.gt_boxes)


def brute_ap(dets):
    res, n_gt = brute_match(dets)
    if not res or not n_gt:
        return 0.0
    tp = fp = 0
    pts = []
    for _, hit in res:
        tp += hit
        fp += not hit
        pts.append((tp / n_gt, tp / (tp + fp)))
    ap, prev = 0.0, 0.0
    for k, (rec, _) in enumerate(pts):
        if rec > prev:
            ap += (rec - prev) * max(p for r2, p in pts[k:])
            prev = rec
    return ap


def brute_mr(dets, points):
    res, n_gt = brute_match(dets)
    curve = [(0.0, 1.0)]
    for t in sorted({s for s, _ in res}, reverse=True):
        kept = [h for s, h in res if s >= t]
        tp = sum(kept)
        curve.append(((len(kept) - tp) / dets.num_images, 1 - tp / n_gt))
    return [min(m for f, m in curve if f <= p) for p in points]


def random_dets(rng, n_img=3, max_gt=3, max_det=4, size=20):
    def boxes(k):
        xy = rng.uniform(0, size, (k, 2))
        wh = rng.uniform(2, 8, (k, 2))
        return np.concatenate([xy, xy + wh], 1)
    gts = [boxes(int(rng.integers(1, max_gt + 1))) for _ in range(n_img)]
    preds, scores = [], []
    for g in gts:
        k = int(rng.integers(0, max_det + 1))
        p = boxes(k)
        for j in range(min(k, len(g))):
            if rng.random() < 0.6:
                p[j] = g[j] + rng.normal(0, 0.6, 4)
                p[j, 2:] = np.maximum(p[j, 2:], p[j, :2] + 0.5)
        preds.append(p)
        scores.append(np.round(rng.uniform(0, 1, k), 1))       # coarse scores give ties
    return DetectionSet(preds, scores, gts)


# -- splits ------------------------------------------------------------------------------------------

def test_percentage_cifar_shaped():
    labels = cifar_shaped_labels()
    s = percentage_shot_split(labels, 0.1, seed=0)
    assert s.counts() == {c: 500 for c in range(10)}
    assert np.all(labels[s.per_class[3]] == 3)


def test_percentage_identity_and_floor():
    labels = np.repeat(np.arange(3), [10, 9, 4])
    assert np.array_equal(percentage_shot_split(labels, 1.0, 0).indices, np.arange(len(labels)))
    s = percentage_shot_split(labels, 0.1, 0)
    assert s.counts() == {0: 1, 1: 0, 2: 0}


def test_percentage_prefix_monotone_and_deterministic():
    labels = np.random.default_rng(0).integers(0, 5, 400)
    a = percentage_shot_split(labels, 0.1, seed=3)
    b = percentage_shot_split(labels, 0.2, seed=3)
    assert set(a.indices) <= set(b.indices)
    assert np.array_equal(a.indices, percentage_shot_split(labels, 0.1, seed=3).indices)
    with pytest.raises(ValueError):
        percentage_shot_split(labels, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=200), st.floats(0.01, 1.0))
def test_percentage_counts_are_floors(labels, p):
    labels = np.asarray(labels)
    s = percentage_shot_split(labels, p, 0)
    for c, n in s.counts().items():
        assert n == (int((labels == c).sum()) if p == 1 else math.floor(p * (labels == c).sum() + 1e-9))


def test_k_shot():
    labels = np.repeat(np.arange(4), [5, 5, 2, 5])
    s = n_way_k_shot_split(labels, 1, seed=0)
    assert s.counts() == {0: 1, 1: 1, 2: 1, 3: 1}
    with pytest.warns(UserWarning):
        s = n_way_k_shot_split(labels, 4, seed=0)
    assert s.counts()[2] == 2 and s.warnings
    with pytest.warns(UserWarning):
        again = n_way_k_shot_split(labels, 4, seed=0)
    assert np.array_equal(s.indices, again.indices)
    j = json.loads(s.to_json())
    assert j["mode"] == "n_way_k_shot" and len(j["per_class"]["0"]) == 4


# -- linear probe -----------------------------------------------------------------------------------

def test_probe_separable():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    x = rng.normal(0, 1, (200, 5))
    x[:, 0] += np.where(y == 1, 4, -4)
    res = linear_probe(x[:150], y[:150], x[150:], y[150:], ProbeProtocol(max_iter=200))
    assert res.val_accuracy == 1.0
    assert len(res.log) == 4 * 4 * 2
    assert np.array_equal(res.predict(x[150:]), y[150:])


def test_probe_shuffled_labels_chance():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, (4000, 4))
    y = rng.permutation(np.repeat([0, 1], 2000))
    res = linear_probe(x[:2000], y[:2000], x[2000:], y[2000:], ProbeProtocol("quasi_newton_full_batch"))
    assert abs(res.val_accuracy - 0.5) <= 0.05


def test_probe_quasi_newton_and_ties():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, 90)
    x = np.eye(3)[y] * 5 + rng.normal(0, 0.1, (90, 3))
    proto = ProbeProtocol("quasi_newton_full_batch", max_iter=5000)
    assert proto.max_iter == 1000
    res = linear_probe(x, y, x, y, proto)
    assert res.val_accuracy == 1.0 and len(res.log) == 4
    assert res.best["weight_decay"] == min(r["weight_decay"] for r in res.log)   # all tie -> smallest


def test_probe_degenerate():
    with pytest.raises(ValueError):
        linear_probe(np.zeros((4, 2)), np.zeros(4, int), np.zeros((2, 2)), np.zeros(2, int))


# -- classification metrics ---------------------------------------------------------------------------

def test_accuracy_and_mean_per_class():
    labels = np.array([0] * 9 + [1])
    preds = np.zeros(10, int)
    assert accuracy(preds, labels) == pytest.approx(0.9)
    assert mean_per_class(preds, labels) == pytest.approx(0.5)
    assert accuracy(labels, labels) == 1.0
    perm = np.random.default_rng(0).permutation(10)
    assert mean_per_class(preds[perm], labels[perm]) == mean_per_class(preds, labels)
    with pytest.raises(ValueError):
        accuracy([], [])


def test_fpr_at_recall_example():
    # positives {0.9, 0.8, 0.4}, negatives {0.7, 0.3}
    s1 = np.array([0.9, 0.8, 0.4, 0.7, 0.3])
    labels = np.array([1, 1, 1, 0, 0])
    scores = np.stack([1 - s1, s1], 1)
    from multistage.evalbench import _binary_fpr_at_recall
    assert _binary_fpr_at_recall([0.9, 0.8, 0.4], [0.7, 0.3], 0.9) == 0.5
    assert fpr_at_recall(scores, labels, 0.9) == brute_fpr_at_recall(scores, labels, 0.9)


def test_fpr_skips_class_without_positives():
    scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0]])
    with pytest.warns(UserWarning, match="no positives"):
        assert fpr_at_recall(scores, np.array([0, 1]), 1.0) == 0.0


def test_fpr_perfect_separation():
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]])
    labels = np.array([0, 0, 1])
    for r in (0.1, 0.5, 1.0):
        assert fpr_at_recall(scores, labels, r) == 0.0


def test_fpr_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n, k = int(rng.integers(3, 12)), int(rng.integers(2, 4))
        scores = np.round(rng.uniform(0, 1, (n, k)), 1)
        labels = rng.integers(0, k, n)
        labels[:k] = np.arange(k)
        r = float(rng.choice([0.1, 0.5, 0.8, 0.95, 1.0]))
        assert fpr_at_recall(scores, labels, r) == pytest.approx(brute_fpr_at_recall(scores, labels, r), abs=1e-6)


def test_fpr_monotone_in_recall():
    rng = np.random.default_rng(3)
    scores = rng.uniform(0, 1, (50, 3))
    labels = rng.integers(0, 3, 50)
    vals = [fpr_at_recall(scores, labels, r) for r in (1.0, 0.9, 0.7, 0.5, 0.2)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# -- detection metrics ---------------------------------------------------------------------------------

def test_ap_simple_cases():
    gt = [np.array([[0, 0, 10, 10]])]
    assert ap50(DetectionSet([np.array([[0, 0, 10, 10]])], [[0.9]], gt)) == 1.0
    assert ap50(DetectionSet([np.zeros((0, 4))], [[]], gt)) == 0.0


def test_ap_hand_staircase():
    gt = [np.array([[0, 0, 10, 10], [20, 20, 30, 30]])]
    preds = [np.array([[0, 0, 10, 10], [50, 50, 60, 60], [20, 20, 30, 30]])]
    # TP, FP, TP: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> AP = 0.5*1 + 0.5*2/3
    assert ap50(DetectionSet(preds, [[0.9, 0.8, 0.7]], gt)) == pytest.approx(0.5 + 1 / 3)


def test_ap_order_invariant_and_oracle():
    rng = np.random.default_rng(0)
    for _ in range(150):
        d = random_dets(rng)
        assert ap50(d) == pytest.approx(brute_ap(d), abs=1e-6)
        perm = [rng.permutation(len(s)) for s in d.scores]
        shuffled = DetectionSet([b[p] for b, p in zip(d.pred_boxes, perm)],
                                [s[p] for s, p in zip(d.scores, perm)], d.gt_boxes)
        assert ap50(shuffled) == ap50(d)


def test_ap_with_labels():
    gt = [np.array([[0, 0, 10, 10], [20, 20, 30, 30]])]
    preds = [np.array([[0, 0, 10, 10], [20, 20, 30, 30]])]
    d = DetectionSet(preds, [[0.9, 0.8]], gt, pred_labels=[[0, 0]], gt_labels=[[0, 1]])
    assert ap50(d) == pytest.approx(0.5)


def test_detection_validation():
    with pytest.raises(ValueError):
        DetectionSet([np.array([[0, 0, 1, 1]])], [[1.5]], [np.zeros((0, 4))])
    with pytest.raises(ValueError):
        DetectionSet([np.array([[5, 0, 1, 1]])], [[0.5]], [np.zeros((0, 4))])


def test_mr_extremes():
    gt = [np.array([[0, 0, 10, 10]]), np.array([[5, 5, 15, 15]])]
    perfect = DetectionSet([g.copy() for g in gt], [[0.9], [0.8]], gt)
    assert np.all(mr_at_fppi(perfect) == 0.0)
    assert log_average_mr(perfect) < 1e-9
    empty = DetectionSet([np.zeros((0, 4))] * 2, [[], []], gt)
    assert np.all(mr_at_fppi(empty) == 1.0)
    assert log_average_mr(empty) == 1.0


def test_mr_two_image_case():
    gt = [np.array([[0, 0, 10, 10]]), np.array([[0, 0, 10, 10], [20, 20, 30, 30]])]
    preds = [np.array([[0, 0, 10, 10], [40, 40, 50, 50]]), np.array([[20, 20, 30, 30], [60, 60, 70, 70]])]
    d = DetectionSet(preds, [[0.9, 0.6], [0.7, 0.5]], gt)
    pts = (0.01, 0.5, 1.0)
    # thresholds: 0.9 -> (0, 2/3); 0.7 -> (0, 1/3); 0.6 -> (0.5, 1/3); 0.5 -> (1, 1/3)
    np.testing.assert_allclose(mr_at_fppi(d, pts), [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(mr_at_fppi(d, pts), brute_mr(d, pts))


def test_mr_matches_brute_force():
    rng = np.random.default_rng(1)
    pts = tuple(np.logspace(-2, 0, 9))
    for _ in range(150):
        d = random_dets(rng)
        np.testing.assert_allclose(mr_at_fppi(d, pts), brute_mr(d, pts), atol=1e-6)


# -- dense metrics -------------------------------------------------------------------------------------

def test_miou_cases():
    m = np.random.default_rng(0).integers(0, 3, (5, 5))
    assert miou(m, m, 3) == 1.0
    a = np.zeros((4, 4), int)
    assert miou(a, 1 - a, 2) == 0.0
    gt = np.array([[0, 0, 1, 1]] * 4)
    pred = np.array([[0, 1, 1, 1]] * 4)
    # class 0: inter 4, union 8; class 1: inter 8, union 12
    assert miou(pred, gt, 2) == pytest.approx((4 / 8 + 8 / 12) / 2)
    with pytest.raises(ValueError):
        miou(a, a[:2])


def test_miou_matches_loop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        p, g = rng.integers(0, 4, (6, 6)), rng.integers(0, 4, (6, 6))
        vals = []
        for c in range(4):
            if (p == c).any() or (g == c).any():
                inter = sum(1 for i in range(6) for j in range(6) if p[i, j] == c and g[i, j] == c)
                union = sum(1 for i in range(6) for j in range(6) if p[i, j] == c or g[i, j] == c)
                vals.append(inter / union)
        assert miou(p, g, 4) == pytest.approx(np.mean(vals), abs=1e-12)


def test_rmse_cases():
    g = np.random.default_rng(0).uniform(0, 1, (4, 4))
    assert rmse_depth(g, g, np.ones_like(g, bool)) == 0.0
    assert rmse_depth(g + 1, g, np.ones_like(g, bool)) == pytest.approx(1.0)
    pred, gt = np.array([1.0, 2.0, 4.0, 100.0]), np.array([1.0, 0.0, 1.0, 0.0])
    mask = np.array([True, True, True, False])
    assert rmse_depth(pred, gt, mask) == pytest.approx(math.sqrt((0 + 4 + 9) / 3))
    with pytest.raises(ValueError):
        rmse_depth(pred, gt, np.zeros(4, bool))


def test_metrics_pure():
    rng = np.random.default_rng(7)
    d = random_dets(rng)
    assert ap50(d) == ap50(d)
    assert np.array_equal(mr_at_fppi(d), mr_at_fppi(d))


# -- reports -------------------------------------------------------------------------------------------

def test_report_roundtrip(tmp_path, monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    r = MetricReport("syn-cls", "percentage:0.1", "linear_probe", {"accuracy": 0.5}, seed=1)
    assert r.timestamp == 0
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    r2 = MetricReport("syn-cls", "full", "mf", {"b": 1.0, "a": 2.0}, seed=2)
    assert r2.timestamp == 1700000000
    path = tmp_path / "m.jsonl"
    write_reports(path, [r, r2])
    back = read_reports(path)
    assert [x.to_json() for x in back] == [r.to_json(), r2.to_json()]
    first = path.read_bytes()
    write_reports(path, [r, r2])
    assert path.read_bytes() == first
