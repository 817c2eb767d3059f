"""Downstream evaluation: data-efficient splits, linear probes and metrics."""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize as sciopt
from scipy.special import log_softmax

from . import boxes as B


# -- splits ---------------------------------------------------------------------------------

@dataclass
class Split:
    dataset: str
    mode: str                       # percentage | n_way_k_shot | full
    value: float | None
    seed: int
    per_class: dict[int, np.ndarray]
    warnings: list[str] = field(default_factory=list)

    @property
    def indices(self) -> np.ndarray:
        parts = [self.per_class[c] for c in sorted(self.per_class)]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in sorted(self.per_class.items())}

    def to_json(self) -> str:
        return json.dumps({"dataset": self.dataset, "mode": self.mode, "value": self.value, "seed": self.seed,
                           "per_class": {str(c): v.tolist() for c, v in sorted(self.per_class.items())}},
                          sort_keys=True)


def _class_shuffles(labels, seed: int) -> dict[int, np.ndarray]:
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    return {int(c): rng.permutation(np.nonzero(labels == c)[0]) for c in np.unique(labels)}


def percentage_shot_split(labels, p: float, seed: int = 0, dataset: str = "") -> Split:
    """Per class: seeded shuffle, keep the first floor(p * n_c)."""
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    per = {}
    for c, perm in _class_shuffles(labels, seed).items():
        k = len(perm) if p == 1 else int(math.floor(p * len(perm) + 1e-9))
        per[c] = np.sort(perm[:k])
    return Split(dataset, "percentage", p, seed, per)


def n_way_k_shot_split(labels, k: int, seed: int = 0, dataset: str = "") -> Split:
    if k < 1:
        raise ValueError("k must be positive")
    per, notes = {}, []
    for c, perm in _class_shuffles(labels, seed).items():
        if len(perm) < k:
            msg = f"class {c} has {len(perm)} samples, fewer than k={k}; truncated"
            warnings.warn(msg)
            notes.append(msg)
        per[c] = np.sort(perm[:k])
    return Split(dataset, "n_way_k_shot", k, seed, per, notes)


def full_split(labels, dataset: str = "") -> Split:
    labels = np.asarray(labels)
    return Split(dataset, "full", None, 0, {int(c): np.nonzero(labels == c)[0] for c in np.unique(labels)})


# -- linear probe ------------------------------------------------------------------------------

@dataclass
class ProbeProtocol:
    strategy: str = "sgd_grid"      # sgd_grid | quasi_newton_full_batch
    lrs: tuple[float, ...] = tuple(np.logspace(-4, -1, 4))
    wds: tuple[float, ...] = tuple(np.logspace(-6, -3, 4))
    momenta: tuple[float, ...] = (0.9, 0.99)
    max_iter: int = 10_000
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("sgd_grid", "quasi_newton_full_batch"):
            raise ValueError(f"unknown probe strategy {self.strategy!r}")
        if self.strategy == "quasi_newton_full_batch" and self.max_iter > 1000:
            self.max_iter = 1000

    def cells(self) -> list[tuple[float, float, float]]:
        if self.strategy == "quasi_newton_full_batch":
            return [(0.0, float(wd), 0.0) for wd in self.wds]
        return [(float(lr), float(wd), float(m)) for lr in self.lrs for wd in self.wds for m in self.momenta]


@dataclass
class ProbeResult:
    weight: np.ndarray              # (D, K), applied to standardized features
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    val_accuracy: float
    best: dict
    log: list[dict]

    def predict(self, feats) -> np.ndarray:
        return self.scores(feats).argmax(1)

    def scores(self, feats) -> np.ndarray:
        z = (np.asarray(feats, np.float64) - self.mean) / self.scale
        return z @ self.weight + self.bias


def _xent_and_grad(w, b, x, y, wd):
    logits = x @ w + b
    lp = log_softmax(logits, axis=1)
    n = len(y)
    loss = -lp[np.arange(n), y].mean() + 0.5 * wd * (w * w).sum()
    p = np.exp(lp)
    p[np.arange(n), y] -= 1
    p /= n
    return loss, x.T @ p + wd * w, p.sum(0)


def _fit_sgd(x, y, k, lr, wd, momentum, max_iter, batch, rng):
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    for _ in range(max_iter):
        idx = rng.integers(0, len(x), size=min(batch, len(x)))
        _, gw, gb = _xent_and_grad(w, b, x[idx], y[idx], wd)
        vw = momentum * vw + gw
        vb = momentum * vb + gb
        w -= lr * vw
        b -= lr * vb
    return w, b


def _fit_lbfgs(x, y, k, wd, max_iter):
    d = x.shape[1]

    def fun(theta):
        w, b = theta[:d * k].reshape(d, k), theta[d * k:]
        loss, gw, gb = _xent_and_grad(w, b, x, y, wd)
        return loss, np.concatenate([gw.ravel(), gb])

    res = sciopt.minimize(fun, np.zeros(d * k + k), jac=True, method="L-BFGS-B",
                          options={"maxiter": max_iter})
    return res.x[:d * k].reshape(d, k), res.x[d * k:]


def linear_probe(train_feats, train_labels, val_feats, val_labels, protocol: ProbeProtocol | None = None,
                 num_classes: int | None = None) -> ProbeResult:
    """Train a softmax head on frozen features; pick the grid cell with the best validation accuracy.

    Ties go to the smaller lr, then the smaller wd, then the smaller momentum.
    """
    protocol = protocol or ProbeProtocol()
    x = np.asarray(train_feats, np.float64).reshape(len(train_feats), -1)
    y = np.asarray(train_labels, np.int64)
    xv = np.asarray(val_feats, np.float64).reshape(len(val_feats), -1)
    yv = np.asarray(val_labels, np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("linear probe needs at least two classes in the training labels")
    if len(xv) == 0:
        raise ValueError("empty validation split")
    k = num_classes or int(max(y.max(), yv.max()) + 1)
    mean, scale = x.mean(0), x.std(0) + 1e-8
    z, zv = (x - mean) / scale, (xv - mean) / scale
    log, fits = [], []
    for i, (lr, wd, m) in enumerate(protocol.cells()):
        if protocol.strategy == "sgd_grid":
            w, b = _fit_sgd(z, y, k, lr, wd, m, protocol.max_iter, protocol.batch,
                            np.random.default_rng([protocol.seed, i]))
        else:
            w, b = _fit_lbfgs(z, y, k, wd, protocol.max_iter)
        acc = float(((zv @ w + b).argmax(1) == yv).mean())
        log.append({"cell": i, "lr": lr, "weight_decay": wd, "momentum": m, "val_acc": acc})
        fits.append((w, b))
    best = min(log, key=lambda r: (-r["val_acc"], r["lr"], r["weight_decay"], r["momentum"]))
    w, b = fits[best["cell"]]
    return ProbeResult(w, b, mean, scale, best["val_acc"], best, log)


# -- classification metrics ---------------------------------------------------------------------

def _pair(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("metric on empty input")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    return float((preds == labels).mean())


def mean_per_class(preds, labels) -> float:
    """Mean over ground-truth classes of per-class recall."""
    preds, labels = _pair(preds, labels)
    return float(np.mean([(preds[labels == c] == c).mean() for c in np.unique(labels)]))


def _binary_fpr_at_recall(pos, neg, r: float) -> float:
    """Smallest FPR over thresholds (observed scores and -inf) whose recall is at least r."""
    pos = np.sort(np.asarray(pos, np.float64))[::-1]
    neg = np.asarray(neg, np.float64)
    need = int(math.ceil(r * len(pos) - 1e-12))
    # the loosest threshold reaching ``need`` positives is the need-th highest positive score
    t = pos[need - 1] if need > 0 else np.inf
    return float((neg >= t).mean()) if len(neg) else 0.0


def fpr_at_recall(scores, labels, r: float) -> float:
    """One-vs-rest FPR at recall r, averaged over classes that have positives."""
    if not 0 < r <= 1:
        raise ValueError("recall must lie in (0, 1]")
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    out = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if not pos.any():
            warnings.warn(f"class {c} has no positives; skipped")
            continue
        out.append(_binary_fpr_at_recall(scores[pos, c], scores[~pos, c], r))
    if not out:
        raise ValueError("no class has positives")
    return float(np.mean(out))


# -- detection metrics -----------------------------------------------------------------------------

@dataclass
class DetectionSet:
    """Per image: predicted boxes, their scores and ground-truth boxes (x1, y1, x2, y2)."""
    pred_boxes: list
    scores: list
    gt_boxes: list
    pred_labels: list | None = None
    gt_labels: list | None = None

    def __post_init__(self):
        n = len(self.gt_boxes)
        if len(self.pred_boxes) != n or len(self.scores) != n:
            raise ValueError("per-image lists differ in length")
        self.pred_boxes = [np.asarray(b, np.float64).reshape(-1, 4) for b in self.pred_boxes]
        self.gt_boxes = [np.asarray(b, np.float64).reshape(-1, 4) for b in self.gt_boxes]
        self.scores = [np.asarray(s, np.float64).reshape(-1) for s in self.scores]
        for pb, s in zip(self.pred_boxes, self.scores):
            if len(pb) != len(s):
                raise ValueError("boxes and scores differ in length")
            if np.any((s < 0) | (s > 1)):
                raise ValueError("scores must lie in [0, 1]")
            if np.any(pb[:, 2] < pb[:, 0]) or np.any(pb[:, 3] < pb[:, 1]):
                raise ValueError("malformed box")

    @property
    def num_images(self) -> int:
        return len(self.gt_boxes)

    def for_class(self, c) -> "DetectionSet":
        pl, gl = self.pred_labels, self.gt_labels
        keep_p = [np.asarray(l) == c for l in pl]
        keep_g = [np.asarray(l) == c for l in gl]
        return DetectionSet([b[k] for b, k in zip(self.pred_boxes, keep_p)],
                            [s[k] for s, k in zip(self.scores, keep_p)],
                            [b[k] for b, k in zip(self.gt_boxes, keep_g)])


def match_detections(dets: DetectionSet, iou_thresh: float = 0.5):
    """Greedy score-ordered matching; returns (scores, is_tp, image_ids) sorted by score, and #gt.

    Each detection takes the unmatched ground truth of highest IoU in its image.
    Ties in score are broken by image index and box coordinates, so the
    result does not depend on input order.
    """
    rows = []
    for i, (pb, s) in enumerate(zip(dets.pred_boxes, dets.scores)):
        for b, sc in zip(pb, s):
            rows.append((-sc, i, *b))
    rows.sort()
    matched = [np.zeros(len(g), bool) for g in dets.gt_boxes]
    scores, tp, img = [], [], []
    for neg_s, i, *box in rows:
        gt = dets.gt_boxes[i]
        hit = False
        if len(gt):
            ious = B.iou_matrix(np.asarray(box)[None], gt)[0]
            ious[matched[i]] = -1
            j = int(ious.argmax())
            if ious[j] >= iou_thresh:
                matched[i][j] = True
                hit = True
        scores.append(-neg_s)
        tp.append(hit)
        img.append(i)
    n_gt = sum(len(g) for g in dets.gt_boxes)
    return np.asarray(scores), np.asarray(tp, bool), np.asarray(img), n_gt


def _ap_single(dets: DetectionSet) -> float:
    _, tp, _, n_gt = match_detections(dets)
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # all-point interpolation: precision envelope integrated over recall steps
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def ap50(dets: DetectionSet) -> float:
    """AP at IoU 0.5; with labels, the mean over ground-truth classes."""
    if dets.gt_labels is None:
        return _ap_single(dets)
    classes = np.unique(np.concatenate([np.asarray(l) for l in dets.gt_labels] or [np.zeros(0)]))
    if classes.size == 0:
        return 0.0
    return float(np.mean([_ap_single(dets.for_class(c)) for c in classes]))


MR_FPPI_POINTS = tuple(np.logspace(-2, 0, 9))


def mr_at_fppi(dets: DetectionSet, fppi_points=MR_FPPI_POINTS) -> np.ndarray:
    """Miss rate at each FPPI point.

    The curve is swept over score thresholds (all detections at or above the
    threshold kept); at each point the lowest miss rate whose FPPI does not
    exceed it is taken. With no detections kept the miss rate is 1.
    """
    if dets.num_images < 1:
        raise ValueError("need at least one image")
    scores, tp, _, n_gt = match_detections(dets)
    fppi, mr = [0.0], [1.0]
    if n_gt and len(scores):
        ends = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0]   # last index of each score group
        ctp, cfp = np.cumsum(tp), np.cumsum(~tp)
        fppi += list(cfp[ends] / dets.num_images)
        mr += list(1.0 - ctp[ends] / n_gt)
    elif n_gt == 0:
        mr = [0.0]
    fppi, mr = np.asarray(fppi), np.asarray(mr)
    return np.array([mr[fppi <= p].min() for p in fppi_points])


def log_average_mr(dets: DetectionSet, fppi_points=MR_FPPI_POINTS) -> float:
    """Geometric mean of miss rates over nine log-spaced FPPI points in [1e-2, 1]."""
    mrs = mr_at_fppi(dets, fppi_points)
    return float(np.exp(np.mean(np.log(np.maximum(mrs, 1e-10)))))


# -- dense metrics ------------------------------------------------------------------------------------

def miou(pred_maps, gt_maps, num_classes: int | None = None) -> float:
    """Mean IoU over classes present in either map."""
    pred, gt = np.asarray(pred_maps), np.asarray(gt_maps)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    classes = np.union1d(np.unique(pred), np.unique(gt))
    if num_classes is not None:
        classes = classes[(classes >= 0) & (classes < num_classes)]
    ious = []
    for c in classes:
        p, g = pred == c, gt == c
        ious.append((p & g).sum() / (p | g).sum())
    return float(np.mean(ious)) if ious else 0.0


def rmse_depth(pred, gt, valid_mask=None) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = np.ones(pred.shape, bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if not mask.any():
        raise ValueError("no valid pixels")
    return float(np.sqrt(((pred - gt)[mask] ** 2).mean()))


# -- reports ------------------------------------------------------------------------------------------

def build_timestamp() -> int:
    """Seconds since the epoch from SOURCE_DATE_EPOCH (0 when unset) so reports are reproducible."""
    return int(os.environ.get("SOURCE_DATE_EPOCH", "0"))


@dataclass
class MetricReport:
    dataset: str
    split: str
    protocol: str
    metrics: dict[str, float]
    seed: int
    timestamp: int = field(default_factory=build_timestamp)

    def to_json(self) -> str:
        d = asdict(self)
        d["metrics"] = {k: float(v) for k, v in sorted(self.metrics.items())}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricReport":
        return cls(**json.loads(line))


def write_reports(path, reports) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path) -> list[MetricReport]:
    with open(path) as fh:
        return [MetricReport.from_json(l) for l in fh if l.strip()]
