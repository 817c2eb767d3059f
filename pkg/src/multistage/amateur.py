"""Upstream-Amateur: image-text pretraining with group supervision, then
local-representation learning on top of the frozen backbone."""
from __future__ import annotations

import copy
import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .blocks import (
    DEFAULT_ARCH, DEFAULT_STEM, FPN, LEVEL_STRIDES, Backbone, BlockConfig, FeatureMapSet, GOPAttnBlock,
    stages_from_records,
)
from .tensor import F, LayerNorm, Linear, Module, Optimizer, OptimizerState, Parameter, ReLU, Sequential, Tensor, no_grad

log = logging.getLogger(__name__)

PROPOSAL_LEVELS = ("P2", "P3", "P4", "P5")
LEVEL_PROBS = (0.1, 0.2, 0.3, 0.4)


@dataclass
class AmateurConfig:
    steps: int = 200
    batch: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.05
    alpha: float = 0.5
    tau_init: float = 0.07
    embed_dim: int = 32
    text_width: int = 32
    queue_capacity: int = 512
    mlm_rate: float = 0.15
    monitor_threshold: float = 0.5
    rollback_depth: int = 10
    # local stage
    local_steps: int = 50
    proposal_count: int = 8
    ema_momentum: float = 0.99
    fpn_channels: int = 16


# -- encoders --------------------------------------------------------------------------------

class EncoderPair(Module):
    """Image backbone + projection and a small transformer text encoder, both to unit D-vectors."""

    def __init__(self, backbone: Backbone, rng: np.random.Generator, embed_dim: int = 32, text_width: int = 32,
                 vocab: int = len(D.VOCAB), max_len: int = D.CAPTION_LEN, tau_init: float = 0.07,
                 text_layers: int = 1):
        super().__init__()
        if tau_init <= 0:
            raise ValueError("temperature must be positive")
        self.backbone = backbone
        self.img_proj = Linear(backbone.channels["C5"], embed_dim, rng)
        self.tok_embed = Parameter(rng.normal(0, 0.1, (vocab, text_width)).astype(np.float32))
        self.pos_embed = Parameter(rng.normal(0, 0.1, (max_len, text_width)).astype(np.float32))
        self.text_blocks = [GOPAttnBlock(BlockConfig("self_attention", text_width, 2), rng)
                            for _ in range(text_layers)]
        self.text_norm = LayerNorm(text_width)
        self.txt_proj = Linear(text_width, embed_dim, rng)
        self.mlm_head = Linear(text_width, vocab, rng)
        self.log_tau = Parameter(np.array(math.log(tau_init), dtype=np.float32))

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp()

    def image_features(self, x: Tensor) -> Tensor:
        return F.global_avg_pool(self.backbone(x)["C5"])

    def encode_image(self, x: Tensor) -> Tensor:
        return F.normalize(self.img_proj(self.image_features(x)))

    def text_tokens(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        b, length = tokens.shape
        h = self.tok_embed[tokens] + self.pos_embed[:length]
        # blocks act on (B, C, 1, L) maps
        h = h.transpose(0, 2, 1).reshape(b, -1, 1, length)
        for blk in self.text_blocks:
            h = blk(h)
        return self.text_norm(h.reshape(b, -1, length).transpose(0, 2, 1))

    def encode_text(self, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns (unit text embedding, per-token features)."""
        h = self.text_tokens(tokens)
        return F.normalize(self.txt_proj(h.mean(axis=1))), h


# -- losses ----------------------------------------------------------------------------------

def _tau(tau) -> Tensor | float:
    if isinstance(tau, Tensor):
        return tau
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return float(tau)


def contrastive_loss(x: Tensor, y, tau=0.07) -> Tensor:
    """Symmetric InfoNCE between row-matched batches (x->y plus y->x)."""
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=x.dtype))
    n = x.shape[0]
    if n == 0:
        raise ValueError("contrastive loss on an empty batch")
    if y.shape[0] != n:
        raise ValueError(f"batch sizes differ: {n} vs {y.shape[0]}")
    logits = (x @ y.T) / _tau(tau)
    target = np.arange(n)
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def negative_cosine(a: Tensor, b: Tensor) -> Tensor:
    return -F.cosine_similarity(a, b).mean()


def mlm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy over masked positions (targets >= 0); 0 when nothing is masked."""
    targets = np.asarray(targets)
    pos = np.nonzero(targets >= 0)
    if pos[0].size == 0:
        warnings.warn("no masked tokens in batch; MLM term is 0", RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=logits.dtype))
    return F.cross_entropy(logits[pos], targets[pos])


def ics_loss(zI: Tensor, zI2: Tensor, zT: Tensor, zT2: Tensor, mlm_logits: Tensor, mlm_targets, tau=0.07) -> Tensor:
    """Intra- and cross-modal supervision: L_CS + L_MLM + four image-text InfoNCE terms."""
    return (negative_cosine(zI, zI2) + mlm_loss(mlm_logits, mlm_targets)
            + contrastive_loss(zI, zT, tau) + contrastive_loss(zI, zT2, tau)
            + contrastive_loss(zI2, zT, tau) + contrastive_loss(zI2, zT2, tau))


class TextQueue:
    """Fixed-capacity FIFO of unit-norm text features."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.buf = np.zeros((capacity, dim), dtype=np.float32)
        self.head = 0   # next write slot
        self.count = 0

    def __len__(self):
        return self.count

    def push(self, feats) -> None:
        feats = np.asarray(feats.data if isinstance(feats, Tensor) else feats, dtype=np.float32)
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
        for row in feats:
            self.buf[self.head] = row
            self.head = (self.head + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def items(self) -> np.ndarray:
        """Entries oldest first."""
        if self.count < self.capacity:
            return self.buf[:self.count].copy()
        return np.concatenate([self.buf[self.head:], self.buf[:self.head]])

    def nearest(self, queries) -> np.ndarray:
        """Index (into ``items()``) of the max-cosine entry for each query."""
        if self.count == 0:
            raise ValueError("text queue is empty; seed it before computing STS")
        q = np.asarray(queries.data if isinstance(queries, Tensor) else queries, dtype=np.float64)
        q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        return np.argmax(q @ self.items().astype(np.float64).T, axis=1)


def sts_loss(zI: Tensor, zI2: Tensor, queue: TextQueue, zT, tau=0.07) -> Tensor:
    """Similar-text supervision: nearest queue neighbours of z^T act as positives for both views."""
    nn = queue.items()[queue.nearest(zT)].astype(zI.dtype)
    return contrastive_loss(zI, nn, tau) + contrastive_loss(zI2, nn, tau)


def group_supervision_loss(ics, sts, alpha: float = 0.5):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return ics * (1.0 - alpha) + sts * alpha


# -- loss monitor ------------------------------------------------------------------------------

@dataclass
class LossMonitor:
    threshold: float = 0.5
    depth: int = 10
    history: list[float] = field(default_factory=list)
    ring: deque = field(default_factory=deque)
    rollbacks: int = 0

    def __post_init__(self):
        self.ring = deque(self.ring, maxlen=self.depth)

    def reference(self) -> float | None:
        if not self.history:
            return None
        return float(np.mean(self.history[-self.depth:]))


def _snapshot(params, opt_state) -> tuple[list[np.ndarray], OptimizerState | None]:
    return [p.data.copy() for p in params], copy.deepcopy(opt_state)


def _restore(snap, params, opt_state) -> None:
    datas, st = snap
    for p, d in zip(params, datas):
        p.data = d.copy()
    if opt_state is not None and st is not None:
        restored = copy.deepcopy(st)
        for k, v in vars(restored).items():
            setattr(opt_state, k, v)


def monitor_step(mon: LossMonitor, loss: float, params, opt_state=None) -> str:
    """Decide whether the current batch may update the weights.

    A loss more than ``threshold`` above the mean of recent accepted losses
    (or a non-finite loss) skips the update and restores the oldest snapshot
    in the ring, i.e. the weights from ``depth`` iterations back.
    """
    loss = float(loss)
    ref = mon.reference()
    if not math.isfinite(loss) or (ref is not None and loss - ref > mon.threshold):
        if mon.ring:
            oldest = mon.ring[0]
            _restore(oldest, params, opt_state)
            mon.ring.clear()
            mon.ring.append(oldest)
        mon.rollbacks += 1
        log.info("loss %.4f vs reference %s: skipped batch and rolled back", loss, ref)
        return "skip_and_rollback"
    mon.ring.append(_snapshot(params, opt_state))
    mon.history.append(loss)
    return "proceed"


# -- proposals and RoI features --------------------------------------------------------------

@dataclass(frozen=True)
class Proposal:
    box: tuple[float, float, float, float]
    level: str

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")


def generate_proposals(rng: np.random.Generator, size: int, n: int = 8, min_area: float = 1 / 64) -> np.ndarray:
    """Random boxes inside a size x size image with area at least ``min_area`` of the image."""
    out = np.empty((n, 4), dtype=np.float32)
    min_side = size * math.sqrt(min_area)
    for i in range(n):
        w = rng.uniform(min_side, size)
        h = rng.uniform(max(min_side, min_area * size * size / w), size)
        x1 = rng.uniform(0, size - w)
        y1 = rng.uniform(0, size - h)
        out[i] = (x1, y1, x1 + w, y1 + h)
    return out


def assign_proposals(boxes, rng: np.random.Generator, probs=LEVEL_PROBS) -> list[Proposal]:
    probs = np.asarray(probs, dtype=np.float64)
    if not math.isclose(probs.sum(), 1.0):
        raise ValueError("level probabilities must sum to 1")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    levels = rng.choice(len(PROPOSAL_LEVELS), size=len(boxes), p=probs)
    return [Proposal(tuple(float(v) for v in b), PROPOSAL_LEVELS[l]) for b, l in zip(boxes, levels)]


def roi_align(feature: Tensor, box, out: int = 7, stride: int = 1) -> Tensor:
    """(C, H, W) map -> (C, out, out), one bilinear sample at each bin centre.

    ``box`` is in image pixels; dividing by ``stride`` maps it onto the
    feature grid, where pixel k spans [k, k+1).
    """
    x1, y1, x2, y2 = (float(v) / stride for v in box)
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"degenerate box {box}")
    centres = (np.arange(out) + 0.5) / out
    ys = y1 + centres * (y2 - y1) - 0.5
    xs = x1 + centres * (x2 - x1) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return F.bilinear_sample(feature, gy, gx)


def roi_align_batch(feats: FeatureMapSet, proposals: list[list[Proposal]], out: int = 7) -> Tensor:
    """RoI features for every proposal of every image, stacked to (R, C, out, out)."""
    crops = []
    for b, props in enumerate(proposals):
        for p in props:
            crops.append(roi_align(feats[p.level][b], p.box, out, LEVEL_STRIDES[p.level]))
    return F.stack(crops)


# -- BYOL-style local branch ----------------------------------------------------------------------

def byol_consistency(pred: Tensor, target) -> Tensor:
    """Mean of 2 - 2 cos(pred_i, target_i); no gradient reaches the target side."""
    t = target.detach() if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    return (2.0 - 2.0 * (F.normalize(pred) * F.normalize(t)).sum(axis=-1)).mean()


def momentum_update(target_params, online_params, m: float = 0.99) -> None:
    """target <- m * target + (1 - m) * online, in place."""
    if not 0.0 <= m < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    target_params, online_params = list(target_params), list(online_params)
    if len(target_params) != len(online_params):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        if t.data.shape != o.data.shape:
            raise ValueError(f"shape mismatch {t.data.shape} vs {o.data.shape}")
        t.data = (m * t.data + (1.0 - m) * o.data).astype(t.data.dtype)


class LocalNet(Module):
    """FPN + RoI projector (+ predictor on the online side)."""

    def __init__(self, channels: dict[str, int], rng: np.random.Generator, fpn_channels: int = 16, dim: int = 32,
                 hidden: int = 64, pool: int = 7, predictor: bool = True):
        super().__init__()
        self.pool = pool
        self.fpn = FPN(channels, fpn_channels, rng)
        self.projector = Sequential(Linear(fpn_channels * pool * pool, hidden, rng), ReLU(), Linear(hidden, dim, rng))
        self.predictor = Sequential(Linear(dim, hidden, rng), ReLU(), Linear(hidden, dim, rng)) if predictor else None

    def project(self, c: FeatureMapSet, proposals) -> Tensor:
        rois = roi_align_batch(self.fpn(c), proposals, self.pool)
        return self.projector(rois.reshape(rois.shape[0], -1))

    def forward(self, c: FeatureMapSet, proposals) -> Tensor:
        z = self.project(c, proposals)
        return self.predictor(z) if self.predictor is not None else z


@dataclass
class OnlineTargetPair:
    online: LocalNet
    target: LocalNet
    momentum: float = 0.99

    @classmethod
    def create(cls, channels, rng, momentum: float = 0.99, **kw) -> "OnlineTargetPair":
        online = LocalNet(channels, rng, **kw)
        target = copy.deepcopy(online)
        target.predictor = None
        target.requires_grad_(False)
        return cls(online, target, momentum)

    def shared_params(self):
        tgt = dict(self.target.named_parameters())
        onl = dict(self.online.named_parameters())
        return [tgt[k] for k in tgt], [onl[k] for k in tgt]

    def update_target(self) -> None:
        momentum_update(*self.shared_params(), self.momentum)


# -- training loops ---------------------------------------------------------------------------

@dataclass
class AmateurResult:
    pair: EncoderPair
    losses: list[float]
    rollbacks: int
    local: OnlineTargetPair | None = None
    local_losses: list[float] = field(default_factory=list)


def build_encoder_pair(cfg: AmateurConfig, rng: np.random.Generator, records=DEFAULT_ARCH,
                       stem_channels: int = DEFAULT_STEM) -> EncoderPair:
    backbone = Backbone(stages_from_records(records), rng, stem_channels)
    return EncoderPair(backbone, rng, cfg.embed_dim, cfg.text_width, tau_init=cfg.tau_init)


def train_global(pair: EncoderPair, corpus: D.MultimodalCorpus, cfg: AmateurConfig, seed: int = 0,
                 monitor: LossMonitor | None = None) -> AmateurResult:
    """Group-supervision pretraining of both encoders."""
    rng = np.random.default_rng(seed)
    opt = Optimizer(pair.parameters(), "adamw", cfg.lr, weight_decay=cfg.weight_decay)
    queue = TextQueue(cfg.queue_capacity, cfg.embed_dim)
    monitor = monitor or LossMonitor(cfg.monitor_threshold, cfg.rollback_depth)
    params = pair.parameters()
    losses = []
    n = len(corpus.images)
    pair.train()
    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch, n), replace=False)
        imgs = corpus.images[idx]
        views = np.concatenate([D.augment(imgs, rng), D.augment(imgs, rng)])
        caps = corpus.captions[idx]
        masked, targets = D.mask_tokens(caps, rng, cfg.mlm_rate)
        z_img = pair.encode_image(Tensor(views))
        zI, zI2 = z_img[:len(idx)], z_img[len(idx):]
        zT, _ = pair.encode_text(caps)
        zT2, tok = pair.encode_text(masked)
        tau = pair.tau
        ics = ics_loss(zI, zI2, zT, zT2, pair.mlm_head(tok), targets, tau)
        if len(queue) == 0:
            queue.push(zT.data)
        sts = sts_loss(zI, zI2, queue, zT, tau)
        loss = group_supervision_loss(ics, sts, cfg.alpha)
        value = float(loss.data)
        if monitor_step(monitor, value, params, opt.state) == "proceed":
            opt.zero_grad()
            loss.backward()
            opt.step(cfg.lr * _cosine(step, cfg.steps))
            queue.push(zT.data)
        losses.append(value)
    return AmateurResult(pair, losses, monitor.rollbacks)


def _cosine(step: int, total: int) -> float:
    return 0.5 * (1 + math.cos(math.pi * step / max(1, total)))


def train_local(backbone: Backbone, images: np.ndarray, cfg: AmateurConfig, seed: int = 0,
                rng_init: np.random.Generator | None = None) -> tuple[OnlineTargetPair, list[float]]:
    """Local-representation branch on a frozen backbone: RoI features of random
    proposals from two photometric views must agree (BYOL consistency)."""
    rng = np.random.default_rng(seed)
    rng_init = rng_init or np.random.default_rng(seed + 1)
    pair = OnlineTargetPair.create(backbone.channels, rng_init, cfg.ema_momentum, fpn_channels=cfg.fpn_channels,
                                   dim=cfg.embed_dim)
    opt = Optimizer(pair.online.parameters(), "adamw", cfg.lr, weight_decay=1e-4)
    backbone.eval()
    size = images.shape[-1]
    losses = []
    batch = max(1, min(cfg.batch // 4, len(images)))
    for _ in range(cfg.local_steps):
        idx = rng.choice(len(images), size=batch, replace=False)
        props = [assign_proposals(generate_proposals(rng, size, cfg.proposal_count), rng) for _ in idx]
        v1 = D.augment(images[idx], rng, max_shift=0)
        v2 = D.augment(images[idx], rng, max_shift=0)
        with no_grad():
            c1, c2 = backbone(Tensor(v1)), backbone(Tensor(v2))
            t1, t2 = pair.target(c1, props), pair.target(c2, props)
        loss = byol_consistency(pair.online(c1, props), t2) + byol_consistency(pair.online(c2, props), t1)
        opt.zero_grad()
        loss.backward()
        opt.step()
        pair.update_target()
        losses.append(float(loss.data))
    return pair, losses


def pretrain_amateur(corpus: D.MultimodalCorpus, cfg: AmateurConfig, seed: int = 0, records=DEFAULT_ARCH,
                     stem_channels: int = DEFAULT_STEM, local: bool = True) -> AmateurResult:
    rng = np.random.default_rng(seed)
    pair = build_encoder_pair(cfg, rng, records, stem_channels)
    res = train_global(pair, corpus, cfg, seed)
    if local and cfg.local_steps > 0:
        res.local, res.local_losses = train_local(pair.backbone, corpus.images, cfg, seed + 7)
    return res
