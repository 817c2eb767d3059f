"""Upstream-Expert: one task type, several datasets, one shared trunk.

Datasets play the role of devices: each contributes a sub-batch sized in
proportion to its training set, the trunk sees the union (so batch-norm
statistics are synchronized across sub-batches), and each dataset-specific
head sees only its own sub-batch.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import boxes as B
from .amateur import Proposal, generate_proposals, monitor_step, roi_align_batch
from .blocks import (
    DEFAULT_ARCH, DEFAULT_STEM, FPN, Backbone, BoxHead, ClassificationHead, DenseHead, FeatureMapSet,
    stages_from_records,
)
from .data import TaskData
from .tensor import F, LRSchedule, Module, Optimizer, Tensor, clip_grad_norm, no_grad
from .tensor import checkpoint as ckpt

log = logging.getLogger(__name__)

TASK_TYPES = ("classification", "patchwise", "pixelwise")
SCHEMES = ("natural", "unified", "partially_merged")
TASK_SCHEDULE = {"classification": "cosine", "patchwise": "multistep", "pixelwise": "polynomial"}


@dataclass(frozen=True)
class DatasetDescriptor:
    id: str
    task_type: str
    label_names: tuple[str, ...]
    sample_count: int = 0

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"unknown task type {self.task_type!r}")
        if len(set(self.label_names)) != len(self.label_names):
            raise ValueError(f"duplicate label names in {self.id}")

    @property
    def num_classes(self) -> int:
        return len(self.label_names)


# -- label spaces --------------------------------------------------------------------------

@dataclass
class LabelSpaceMapping:
    scheme: str
    maps: dict[str, np.ndarray]   # dataset id -> local index -> global index
    size: int | dict[str, int]

    def to_global(self, ds_id: str, labels):
        return self.maps[ds_id][np.asarray(labels, dtype=np.int64)]

    def head_size(self, ds_id: str) -> int:
        return self.size[ds_id] if isinstance(self.size, dict) else self.size


def merge_label_spaces(datasets, scheme: str = "natural", synonym_table=()) -> LabelSpaceMapping:
    """Build per-dataset index maps.

    ``synonym_table`` lists pairs ((dataset_id, class_name), (dataset_id, class_name))
    naming the same concept; only the partially merged scheme consults it.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown label-space scheme {scheme!r}")
    datasets = list(datasets)
    if scheme == "natural":
        return LabelSpaceMapping(scheme, {d.id: np.arange(d.num_classes) for d in datasets},
                                 {d.id: d.num_classes for d in datasets})
    keys = [(d.id, name) for d in datasets for name in d.label_names]
    parent = {k: k for k in keys}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    if scheme == "partially_merged":
        for a, b in synonym_table:
            a, b = tuple(a), tuple(b)
            for k in (a, b):
                if k not in parent:
                    raise KeyError(f"synonym table names unknown class {k}")
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb, key=keys.index)] = min(ra, rb, key=keys.index)
    index: dict = {}
    maps = {}
    for d in datasets:
        m = []
        for name in d.label_names:
            root = find((d.id, name))
            index.setdefault(root, len(index))
            m.append(index[root])
        maps[d.id] = np.asarray(m, dtype=np.int64)
    return LabelSpaceMapping(scheme, maps, len(index))


# -- batching --------------------------------------------------------------------------------

def batch_quotas(sizes: dict[str, int], total: int) -> dict[str, int]:
    """Split ``total`` in proportion to ``sizes`` by largest remainders (ties: first listed)."""
    if total < 0:
        raise ValueError("total batch size must be non-negative")
    names = list(sizes)
    denom = sum(sizes.values())
    if denom <= 0:
        raise ValueError("dataset sizes must sum to a positive number")
    exact = [total * sizes[n] / denom for n in names]
    base = [math.floor(e) for e in exact]
    left = total - sum(base)
    order = sorted(range(len(names)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return dict(zip(names, base))


def partition_batch(samples, key=lambda s: s[0]) -> "OrderedDict[str, list]":
    """Group dataset-tagged samples, keeping first-seen dataset order and sample order."""
    groups: OrderedDict[str, list] = OrderedDict()
    for s in samples:
        groups.setdefault(key(s), []).append(s)
    return groups


def draw_samples(sizes: dict[str, int], total: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    """Tagged sample indices whose per-dataset counts follow :func:`batch_quotas`."""
    out = []
    for name, q in batch_quotas(sizes, total).items():
        n = sizes[name]
        idx = rng.choice(n, size=min(q, n), replace=False) if q else []
        out += [(name, int(i)) for i in idx]
    return out


# -- model ---------------------------------------------------------------------------------

class Expert(Module):
    """Shared trunk (backbone, plus FPN for patch-wise) with one head per dataset.

    Under a unified or partially merged label space all datasets share one
    head over the global label set.
    """

    def __init__(self, task_type: str, datasets, backbone: Backbone, rng: np.random.Generator,
                 mapping: LabelSpaceMapping | None = None, fpn_channels: int = 16):
        super().__init__()
        datasets = list(datasets)
        if not datasets:
            raise ValueError("an expert needs at least one dataset")
        kinds = {d.task_type for d in datasets}
        if kinds != {task_type}:
            raise ValueError(f"task-type mismatch: expert is {task_type}, datasets are {sorted(kinds)}")
        self.task_type = task_type
        self._datasets = OrderedDict((d.id, d) for d in datasets)
        self._mapping = mapping or merge_label_spaces(datasets, "natural")
        self.backbone = backbone
        self.fpn = FPN(backbone.channels, fpn_channels, rng) if task_type == "patchwise" else None
        shared = self._mapping.scheme != "natural"
        keys = ["global"] if shared else list(self._datasets)
        self.heads = {}
        for k in keys:
            n = self._mapping.head_size(datasets[0].id if shared else k)
            self.heads[k] = self._make_head(n, rng, fpn_channels)

    def _make_head(self, n: int, rng, fpn_channels: int) -> Module:
        if self.task_type == "classification":
            return ClassificationHead(self.backbone.channels["C5"], n, rng)
        if self.task_type == "patchwise":
            return BoxHead(fpn_channels, n, rng)
        return DenseHead(self.backbone.channels["C2"], n + 1, rng)

    @property
    def datasets(self) -> list[DatasetDescriptor]:
        return list(self._datasets.values())

    @property
    def mapping(self) -> LabelSpaceMapping:
        return self._mapping

    def head_key(self, ds_id: str) -> str:
        if ds_id not in self._datasets:
            raise KeyError(f"no head for dataset {ds_id!r}")
        return "global" if self._mapping.scheme != "natural" else ds_id

    def trunk_parameters(self):
        params = self.backbone.parameters()
        return params + (self.fpn.parameters() if self.fpn is not None else [])

    def trunk(self, x: Tensor) -> FeatureMapSet:
        feats = self.backbone(x)
        return self.fpn(feats) if self.fpn is not None else feats

    def forward(self, x: Tensor, ds_id: str, proposals=None) -> Tensor | tuple[Tensor, Tensor]:
        return self.head_forward(ds_id, self.trunk(x), proposals)

    def head_forward(self, ds_id: str, feats: FeatureMapSet, proposals=None):
        head = self.heads[self.head_key(ds_id)]
        if self.task_type == "classification":
            return head(feats["C5"])
        if self.task_type == "patchwise":
            rois = roi_align_batch(feats, proposals)
            return head(rois)
        return head(feats["C2"])

    def task_loss(self, ds_id: str, feats: FeatureMapSet, batch: TaskData, rng: np.random.Generator) -> Tensor:
        return task_loss(self.task_type, lambda f, props=None: self.head_forward(ds_id, f, props),
                         lambda lab: self._mapping.to_global(ds_id, lab), feats, batch, rng)

    def param_groups(self, trunk_decay: float = 1e-8, head_decay: float | dict | None = None) -> list[dict]:
        """Optimizer groups: trunk first, then one group per head with its own decay."""
        groups = [{"params": self.trunk_parameters(), "weight_decay": trunk_decay, "name": "trunk"}]
        for k, h in self.heads.items():
            wd = head_decay.get(k, trunk_decay) if isinstance(head_decay, dict) else (
                trunk_decay if head_decay is None else head_decay)
            groups.append({"params": h.parameters(), "weight_decay": wd, "name": f"head:{k}"})
        return groups


def task_loss(task_type: str, head_fn, to_global, feats: FeatureMapSet, batch: TaskData,
              rng: np.random.Generator) -> Tensor:
    """Loss of one dataset sub-batch given a head function ``head_fn(feats, proposals)``."""
    if task_type == "classification":
        return F.cross_entropy(head_fn(feats), to_global(batch.labels))
    if task_type == "patchwise":
        size = batch.images.shape[-1]
        props, cls_t, box_t = training_proposals(batch, rng, size)
        cls_t = np.where(cls_t > 0, to_global(np.maximum(cls_t - 1, 0)) + 1, 0)
        logits, deltas = head_fn(feats, props)
        loss = F.cross_entropy(logits, cls_t)
        pos = np.nonzero(cls_t > 0)[0]
        if pos.size:
            d = deltas[pos] - Tensor(box_t[pos].astype(deltas.dtype))
            loss = loss + (d * d).mean()
        return loss
    logits = head_fn(feats)
    stride = batch.images.shape[-1] // logits.shape[-1]
    lab = batch.label_maps[:, stride // 2::stride, stride // 2::stride]
    lab = np.where(lab > 0, to_global(np.maximum(lab - 1, 0)) + 1, 0)
    k = logits.shape[1]
    return F.cross_entropy(logits.transpose(0, 2, 3, 1).reshape(-1, k), lab.reshape(-1))


def training_proposals(batch: TaskData, rng: np.random.Generator, size: int, jitter: int = 2, random: int = 4):
    """Ground truth, jittered ground truth and random boxes with class/box targets.

    Class target 0 is background; positives (IoU >= 0.5) carry 1 + local label.
    """
    all_props, cls_t, box_t = [], [], []
    for gt, lab in zip(batch.boxes, batch.box_labels):
        gt = np.asarray(gt, dtype=np.float64)
        cands = [gt]
        for _ in range(jitter):
            wh = np.stack([gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]], 1)
            shift = rng.uniform(-0.15, 0.15, size=(len(gt), 4)) * np.concatenate([wh, wh], 1)
            cands.append(gt + shift)
        cands.append(generate_proposals(rng, size, random).astype(np.float64))
        props = B.clip_boxes(np.concatenate(cands), size)
        ok = (props[:, 2] - props[:, 0] > 1) & (props[:, 3] - props[:, 1] > 1)
        props = props[ok]
        ious = B.iou_matrix(props, gt)
        best = ious.argmax(1)
        positive = ious[np.arange(len(props)), best] >= 0.5
        cls_t.append(np.where(positive, np.asarray(lab)[best] + 1, 0))
        box_t.append(np.where(positive[:, None], B.encode_deltas(props, gt[best]), 0.0))
        all_props.append([Proposal(tuple(map(float, p)), B.pyramid_level(p)) for p in props])
    return all_props, np.concatenate(cls_t).astype(np.int64), np.concatenate(box_t)


def load_backbone_state(init, prefix: str = "backbone.") -> dict[str, np.ndarray]:
    """Backbone tensors from a checkpoint path or a state dict (prefix stripped when present)."""
    if init is None:
        return {}
    state = ckpt.load(init)[0] if not isinstance(init, dict) else init
    if any(k.startswith(prefix) for k in state):
        state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    return state


def build_expert(task_type: str, datasets, init_checkpoint=None, rng: np.random.Generator | None = None,
                 records=DEFAULT_ARCH, stem_channels: int = DEFAULT_STEM, scheme: str = "natural",
                 synonym_table=(), fpn_channels: int = 16) -> Expert:
    rng = rng if rng is not None else np.random.default_rng(0)
    datasets = list(datasets)
    backbone = Backbone(stages_from_records(records), rng, stem_channels)
    state = load_backbone_state(init_checkpoint)
    if state:
        backbone.load_state_dict(state)
    mapping = merge_label_spaces(datasets, scheme, synonym_table)
    return Expert(task_type, datasets, backbone, rng, mapping, fpn_channels)


# -- training ------------------------------------------------------------------------------

@dataclass
class ExpertConfig:
    steps: int = 200
    batch: int = 32
    lr: float = 2e-3
    optimizer: str = "adamw"
    momentum: float = 0.9
    weight_decay: float = 1e-8
    head_weight_decay: float | None = None
    grad_clip: float | None = None   # segmentation uses max-norm 4
    warmup_steps: int = 0
    schedule: str | None = None      # defaults per task type


def make_optimizer(expert: Expert, cfg: ExpertConfig) -> Optimizer:
    groups = expert.param_groups(cfg.weight_decay, cfg.head_weight_decay)
    hyper = {"momentum": cfg.momentum} if cfg.optimizer.startswith("sgd") else {}
    return Optimizer(groups, cfg.optimizer, cfg.lr, weight_decay=cfg.weight_decay, **hyper)


def expert_losses(expert: Expert, groups: dict[str, TaskData], rng: np.random.Generator):
    """Total and per-dataset losses. The trunk runs once on the concatenated
    sub-batches, which is exactly batch norm synchronized over their union."""
    live = [(k, g) for k, g in groups.items() if len(g) > 0]
    if not live:
        raise ValueError("expert step needs at least one non-empty group")
    x = Tensor(np.concatenate([g.images for _, g in live]))
    feats = expert.trunk(x)
    total, losses, offset = None, {}, 0
    for ds_id, g in live:
        n = len(g)
        sub = FeatureMapSet({k: v[offset:offset + n] for k, v in feats.maps.items()})
        offset += n
        losses[ds_id] = expert.task_loss(ds_id, sub, g, rng)
        total = losses[ds_id] if total is None else total + losses[ds_id]
    return total, losses


def expert_step(expert: Expert, groups: dict[str, TaskData], optimizer: Optimizer, lr: float | None = None,
                rng: np.random.Generator | None = None, grad_clip: float | None = None,
                monitor=None) -> dict[str, float]:
    """One synchronized update over all dataset sub-batches; returns per-dataset losses."""
    rng = rng if rng is not None else np.random.default_rng(0)
    total, parts = expert_losses(expert, groups, rng)
    losses = {k: float(v.data) for k, v in parts.items()}
    value = float(total.data)
    if monitor is not None:
        if monitor_step(monitor, value, optimizer.params, optimizer.state) != "proceed":
            return losses
    elif not math.isfinite(value):
        raise FloatingPointError(f"non-finite expert loss {value}")
    optimizer.zero_grad()
    total.backward()
    for p in optimizer.params:
        # heads without a sub-batch this step get an explicit zero gradient
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if grad_clip:
        clip_grad_norm(optimizer.params, grad_clip)
    optimizer.step(lr)
    return losses


@dataclass
class ExpertRun:
    expert: Expert
    losses: list[dict[str, float]] = field(default_factory=list)


def train_expert(expert: Expert, data: dict[str, TaskData], cfg: ExpertConfig, seed: int = 0) -> ExpertRun:
    """``data`` maps dataset id to its training split."""
    rng = np.random.default_rng(seed)
    opt = make_optimizer(expert, cfg)
    sched = LRSchedule(cfg.schedule or TASK_SCHEDULE[expert.task_type], cfg.lr, cfg.steps,
                       warmup_steps=cfg.warmup_steps)
    sizes = {k: len(v) for k, v in data.items()}
    run = ExpertRun(expert)
    expert.train()
    for step in range(cfg.steps):
        tagged = draw_samples(sizes, cfg.batch, rng)
        groups = {k: data[k].subset([i for _, i in v]) for k, v in partition_batch(tagged).items()}
        run.losses.append(expert_step(expert, groups, opt, sched(step), rng, cfg.grad_clip))
    return run


def save_expert(expert: Expert, path, metadata: dict | None = None) -> None:
    arch = ckpt.arch_hash({"task": expert.task_type, "params": sorted(expert.state_dict())})
    ckpt.save(path, expert.state_dict(), "expert", arch, metadata)


def detect(expert: Expert, images: np.ndarray, ds_id: str, score_thresh: float = 0.05,
           scales=(12, 18, 26, 36), step: int = 8) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Dense anchor proposals -> class scores and refined boxes -> per-class NMS.

    Returns per image (boxes, scores, labels) in the expert's head label space.
    """
    if expert.task_type != "patchwise":
        raise ValueError("detect needs a patch-wise expert")
    size = images.shape[-1]
    anchors = []
    for s in scales:
        for cy in range(step // 2, size, step):
            for cx in range(step // 2, size, step):
                anchors.append((cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2))
    anchors = B.clip_boxes(np.asarray(anchors), size)
    anchors = anchors[(anchors[:, 2] - anchors[:, 0] > 2) & (anchors[:, 3] - anchors[:, 1] > 2)]
    out = []
    expert.eval()
    with no_grad():
        for img in images:
            feats = expert.trunk(Tensor(img[None]))
            props = [[Proposal(tuple(map(float, a)), B.pyramid_level(a)) for a in anchors]]
            logits, deltas = expert.head_forward(ds_id, feats, props)
            prob = F.softmax(logits, -1).data
            fg = prob[:, 1:]
            lab = fg.argmax(1)
            score = fg.max(1)
            boxes = B.clip_boxes(B.decode_deltas(anchors, deltas.data), size)
            keep_all = []
            for c in np.unique(lab[score >= score_thresh]):
                idx = np.nonzero((lab == c) & (score >= score_thresh))[0]
                keep_all += [idx[k] for k in B.nms(boxes[idx], score[idx], 0.4)]
            keep_all = np.asarray(sorted(keep_all), dtype=np.int64)
            out.append((boxes[keep_all], score[keep_all], lab[keep_all]))
    expert.train()
    return out
