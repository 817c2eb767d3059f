"""Box arithmetic shared by the detection head and the metrics."""
from __future__ import annotations

import math

import numpy as np


def iou_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def encode_deltas(props, gt) -> np.ndarray:
    props = np.asarray(props, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pw, ph = props[:, 2] - props[:, 0], props[:, 3] - props[:, 1]
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    return np.stack([((gt[:, 0] + gt[:, 2]) - (props[:, 0] + props[:, 2])) / 2 / pw,
                     ((gt[:, 1] + gt[:, 3]) - (props[:, 1] + props[:, 3])) / 2 / ph,
                     np.log(gw / pw), np.log(gh / ph)], axis=1)


def decode_deltas(props, deltas) -> np.ndarray:
    props = np.asarray(props, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    pw, ph = props[:, 2] - props[:, 0], props[:, 3] - props[:, 1]
    cx = (props[:, 0] + props[:, 2]) / 2 + d[:, 0] * pw
    cy = (props[:, 1] + props[:, 3]) / 2 + d[:, 1] * ph
    w = pw * np.exp(np.clip(d[:, 2], -4, 4))
    h = ph * np.exp(np.clip(d[:, 3], -4, 4))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def nms(boxes, scores, thresh: float = 0.5) -> list[int]:
    order = list(np.argsort(-np.asarray(scores), kind="stable"))
    keep = []
    ious = iou_matrix(boxes, boxes)
    while order:
        i = order.pop(0)
        keep.append(int(i))
        order = [j for j in order if ious[i, j] < thresh]
    return keep


def pyramid_level(box, base: float = 16.0) -> str:
    """P2 for boxes around ``base`` px, one level up per doubling of sqrt(area)."""
    s = math.sqrt(max((box[2] - box[0]) * (box[3] - box[1]), 1e-6))
    k = int(math.floor(2 + math.log2(s / base)))
    return f"P{min(5, max(2, k))}"


def clip_boxes(boxes, size: int) -> np.ndarray:
    return np.clip(np.asarray(boxes, dtype=np.float64), 0, size)
