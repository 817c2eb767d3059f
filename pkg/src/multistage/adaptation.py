"""Down-A: multi-stage fine-tuning, sample-based contrastive regularization
and the FD score between feature sets.

MF runs in four stages:
  1. train a vector-quantized autoencoder (the re-representer) on upstream images;
  2. push downstream images through it (frozen);
  3. train only the new head on re-represented images, backbone frozen;
  4. fine-tune everything on the original images over an lr x wd grid.
"""
from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .amateur import TextQueue, momentum_update, roi_align
from .blocks import Backbone, ClassificationHead
from .data import augment
from .tensor import Conv2d, F, LRSchedule, Linear, Module, Optimizer, Parameter, Tensor, no_grad


# -- stage 1/2: re-representer ---------------------------------------------------------------

class Codebook(Module):
    """Vector-quantized autoencoder: conv encoder (stride 2), K codes, conv decoder."""

    def __init__(self, rng: np.random.Generator, codes: int = 128, dim: int = 8, hidden: int = 16,
                 beta: float = 0.25, in_channels: int = 3):
        super().__init__()
        self.beta = beta
        self.enc1 = Conv2d(in_channels, hidden, 3, rng, stride=2)
        self.enc2 = Conv2d(hidden, dim, 1, rng)
        self.codes = Parameter(rng.standard_normal((codes, dim)).astype(np.float32) * 0.1)
        self.dec1 = Conv2d(dim, hidden, 3, rng)
        self.dec2 = Conv2d(hidden, in_channels, 3, rng)

    @property
    def num_codes(self) -> int:
        return self.codes.shape[0]

    def encode(self, x: Tensor) -> Tensor:
        return self.enc2(F.gelu(self.enc1(x)))

    def decode(self, z: Tensor) -> Tensor:
        return self.dec2(F.gelu(self.dec1(F.upsample_nearest(z, 2))))

    def nearest(self, z) -> np.ndarray:
        """Index of the Euclidean-nearest code for each latent (N, d, H, W) -> (N, H, W)."""
        z = np.asarray(z.data if isinstance(z, Tensor) else z)
        n, d, h, w = z.shape
        flat = z.transpose(0, 2, 3, 1).reshape(-1, d).astype(np.float64)
        e = self.codes.data.astype(np.float64)
        dist = (flat ** 2).sum(1, keepdims=True) - 2 * flat @ e.T + (e ** 2).sum(1)[None]
        return dist.argmin(axis=1).reshape(n, h, w)

    def quantize(self, z):
        """Replace every latent by its nearest code (numpy in, numpy out)."""
        idx = self.nearest(z)
        return self.codes.data[idx].transpose(0, 3, 1, 2)

    def lookup(self, idx: np.ndarray) -> Tensor:
        n, h, w = idx.shape
        return self.codes[idx.reshape(-1)].reshape(n, h, w, -1).transpose(0, 3, 1, 2)

    def losses(self, x: Tensor) -> dict[str, Tensor]:
        z = self.encode(x)
        e = self.lookup(self.nearest(z))
        zq = z + (e - z).detach()          # straight-through estimator
        recon = self.decode(zq)
        out = {"recon": F.mse(recon, x), "codebook": F.mse(e, z.detach()),
               "commit": F.mse(z, e.detach())}
        out["total"] = out["recon"] + out["codebook"] + self.beta * out["commit"]
        return out

    def forward(self, x: Tensor) -> Tensor:
        z = self.encode(x)
        return self.decode(Tensor(self.quantize(z)))


def _farthest_point_init(latents: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point choice of ``k`` rows; duplicates once rows run out."""
    chosen = [int(rng.integers(len(latents)))]
    d = ((latents - latents[chosen[0]]) ** 2).sum(1)
    while len(chosen) < k:
        i = int(d.argmax())
        chosen.append(i)
        d = np.minimum(d, ((latents - latents[i]) ** 2).sum(1))
    return latents[chosen]


def train_rerepresenter(images: np.ndarray, K: int = 128, beta: float = 0.25, steps: int = 300,
                        batch: int = 32, lr: float = 3e-3, seed: int = 0, dim: int = 8,
                        hidden: int = 16) -> Codebook:
    """Fit the re-representer on upstream images; losses land in ``model.history``."""
    images = np.asarray(images, dtype=np.float32)
    rng = np.random.default_rng(seed)
    model = Codebook(rng, K, dim, hidden, beta, images.shape[1])
    with no_grad():
        probe = images[rng.choice(len(images), size=min(len(images), 256), replace=False)]
        lat = model.encode(Tensor(probe)).data.transpose(0, 2, 3, 1).reshape(-1, dim)
    distinct = len(np.unique(np.round(lat, 5), axis=0))
    if distinct < K:
        warnings.warn(f"only {distinct} distinct latents for {K} codes; some codes will stay dead")
    model.codes.data = _farthest_point_init(lat, K, rng).astype(np.float32)
    opt = Optimizer(model.parameters(), "adamw", lr)
    model.history = []
    for _ in range(steps):
        xb = Tensor(images[rng.integers(0, len(images), size=min(batch, len(images)))])
        parts = model.losses(xb)
        opt.zero_grad()
        parts["total"].backward()
        opt.step()
        model.history.append({k: float(v.data) for k, v in parts.items()})
    return model


def rerepresent(images: np.ndarray, codebook: Codebook, batch: int = 64) -> np.ndarray:
    """decode(quantize(encode(x))) with the codebook left untouched."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(codebook(Tensor(images[i:i + batch])).data)
    return np.concatenate(out) if out else images.copy()


# -- downstream model ------------------------------------------------------------------------------

class Classifier(Module):
    """Pretrained backbone plus a fresh linear head on pooled C5."""

    def __init__(self, backbone: Backbone, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.backbone = backbone
        self.head = ClassificationHead(backbone.channels["C5"], num_classes, rng)

    def features(self, x: Tensor) -> Tensor:
        return F.global_avg_pool(self.backbone(x)["C5"])

    def forward(self, x: Tensor) -> Tensor:
        return self.head.fc(self.features(x))


def predict(model: Classifier, images: np.ndarray, batch: int = 128) -> np.ndarray:
    was = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(model(Tensor(images[i:i + batch])).data.argmax(1))
    model.train(was)
    return np.concatenate(out)


@dataclass
class MFConfig:
    stage3_steps: int = 5000
    stage3_batch: int = 64
    stage3_lr_range: tuple[float, float] = (1e-3, 1.0)
    stage3_wd: float = 1e-5
    momentum: float = 0.9
    milestones: tuple[float, ...] = (0.7, 0.9)
    stage4_steps: int = 5000
    stage4_batch: int = 64
    stage4_lr_range: tuple[float, float] = (1e-5, 1e-2)
    stage4_lr_count: int = 5
    stage4_wd_range: tuple[float, float] = (1e-5, 1e-3)
    stage4_wd_count: int = 4
    contrastive: bool = False
    contrastive_weight: float = 0.1
    history: int = 256
    tau: float = 0.2
    ema: float = 0.99
    augment: bool = True

    def lr_grid(self) -> np.ndarray:
        lo, hi = self.stage4_lr_range
        return np.logspace(math.log10(lo), math.log10(hi), self.stage4_lr_count)

    def wd_grid(self) -> np.ndarray:
        lo, hi = self.stage4_wd_range
        return np.logspace(math.log10(lo), math.log10(hi), self.stage4_wd_count)


def sample_log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _sgd(params, lr: float, wd: float, cfg: MFConfig) -> Optimizer:
    return Optimizer([{"params": params, "weight_decay": wd}], "sgd_nesterov", lr, momentum=cfg.momentum)


def mf_stage3(model: Classifier, images: np.ndarray, labels: np.ndarray, cfg: MFConfig, seed: int = 0) -> dict:
    """Head-only training on (re-represented) images; the backbone is never touched.

    Features are extracted once in eval mode, so backbone weights and BN
    statistics stay bit-identical. Returns the sampled lr and the loss trace.
    """
    rng = np.random.default_rng(seed)
    lr = sample_log_uniform(rng, *cfg.stage3_lr_range)
    was = model.training
    model.backbone.eval()
    with no_grad():
        feats = np.concatenate([model.features(Tensor(images[i:i + 128])).data
                                for i in range(0, len(images), 128)])
    model.backbone.train(was)
    sched = LRSchedule("multistep", lr, cfg.stage3_steps, milestones=cfg.milestones)
    opt = _sgd(model.head.parameters(), lr, cfg.stage3_wd, cfg)
    losses = []
    for step in range(cfg.stage3_steps):
        idx = rng.integers(0, len(feats), size=min(cfg.stage3_batch, len(feats)))
        loss = F.cross_entropy(model.head.fc(Tensor(feats[idx])), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step(sched(step))
        losses.append(float(loss.data))
    return {"lr": lr, "losses": losses}


def finetune(model: Classifier, images: np.ndarray, labels: np.ndarray, lr: float, wd: float, cfg: MFConfig,
             rng: np.random.Generator, steps: int | None = None) -> list[float]:
    """Full-model SGD-Nesterov fine-tune with multistep decay (optionally contrastive-regularized)."""
    steps = cfg.stage4_steps if steps is None else steps
    sched = LRSchedule("multistep", lr, steps, milestones=cfg.milestones)
    arm = None
    params = model.parameters()
    if cfg.contrastive:
        online = ContrastNet(model.backbone, "image", rng)
        arm = (online, online.momentum_copy(), FeatureHistory(cfg.history, online.dim))
        params = params + online.proj.parameters()
    opt = _sgd(params, lr, wd, cfg)
    model.train()
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(images), size=min(cfg.stage4_batch, len(images)))
        xb = augment(images[idx], rng) if cfg.augment else images[idx]
        loss = F.cross_entropy(model(Tensor(xb)), labels[idx])
        if arm is not None:
            xk = augment(images[idx], rng)
            loss = loss + cfg.contrastive_weight * sample_contrastive(
                Tensor(xb), Tensor(xk), "image", arm[0], arm[1], arm[2], tau=cfg.tau, m=cfg.ema)
        opt.zero_grad()
        loss.backward()
        for p in opt.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        opt.step(sched(step))
        losses.append(float(loss.data))
    return losses


@dataclass
class GridResult:
    model: Classifier
    lr: float
    weight_decay: float
    val_metric: float
    log: list[dict] = field(default_factory=list)


def select_cell(log: list[dict]) -> dict:
    """Best validation metric; ties go to the smaller lr, then the smaller wd."""
    return min(log, key=lambda r: (-r["val_acc"], r["lr"], r["weight_decay"]))


def mf_stage4(model: Classifier, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
              cfg: MFConfig, seed: int = 0, log_path=None) -> GridResult:
    """Grid over lr x wd; each cell fine-tunes a private copy of ``model``."""
    if len(val[0]) == 0:
        raise ValueError("stage 4 needs a non-empty validation split")
    log, models = [], []
    cell = 0
    for lr in cfg.lr_grid():
        for wd in cfg.wd_grid():
            m = copy.deepcopy(model)
            rng = np.random.default_rng([seed, cell])
            losses = finetune(m, train[0], train[1], float(lr), float(wd), cfg, rng)
            acc = float((predict(m, val[0]) == val[1]).mean())
            log.append({"cell": cell, "lr": float(lr), "weight_decay": float(wd), "val_acc": acc,
                        "final_loss": losses[-1] if losses else None})
            models.append(m)
            cell += 1
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    best = select_cell(log)
    return GridResult(models[best["cell"]], best["lr"], best["weight_decay"], best["val_acc"], log)


def multi_stage_finetune(model: Classifier, codebook: Codebook, train, val, cfg: MFConfig, seed: int = 0,
                         log_path=None) -> tuple[GridResult, dict]:
    """Stages 2-4 on a trained re-representer."""
    images, labels = train
    rerep = rerepresent(images, codebook)
    s3 = mf_stage3(model, rerep, labels, cfg, seed)
    return mf_stage4(model, train, val, cfg, seed, log_path), s3


def plain_finetune(model: Classifier, train, val, cfg: MFConfig, seed: int = 0, log_path=None) -> GridResult:
    """Baseline: the stage-4 grid straight from a fresh head."""
    return mf_stage4(model, train, val, cfg, seed, log_path)


# -- sample-based contrastive --------------------------------------------------------------------

GRANULARITIES = ("image", "instance", "pixel")


class FeatureHistory(TextQueue):
    """FIFO of unit-norm key features serving as contrastive negatives."""


class ContrastNet(Module):
    """Backbone plus a granularity-specific projection.

    image:    pooled C5 -> linear
    instance: RoI-aligned C2 crops -> one linear layer
    pixel:    C2 -> 1x1 conv, ReLU, 1x1 conv, then same-class pixels averaged
    """

    def __init__(self, backbone: Backbone, granularity: str, rng: np.random.Generator, dim: int = 32,
                 hidden: int = 32, pool: int = 3):
        super().__init__()
        if granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {granularity!r}")
        self.granularity, self.dim, self.pool = granularity, dim, pool
        self.backbone = backbone
        ch = backbone.channels
        if granularity == "image":
            self.proj = Linear(ch["C5"], dim, rng)
        elif granularity == "instance":
            self.proj = Linear(ch["C2"] * pool * pool, dim, rng)
        else:
            self.proj = _PixelHead(ch["C2"], hidden, dim, rng)

    def momentum_copy(self) -> "ContrastNet":
        twin = copy.deepcopy(self)
        twin.requires_grad_(False)
        return twin

    def forward(self, x: Tensor, regions=None) -> Tensor:
        feats = self.backbone(x)
        if self.granularity == "image":
            return self.proj(F.global_avg_pool(feats["C5"]))
        if self.granularity == "instance":
            if regions is None:
                raise ValueError("instance granularity needs boxes per image")
            crops = [roi_align(feats["C2"][b], box, self.pool, 4) for b, boxes in enumerate(regions) for box in boxes]
            if not crops:
                raise ValueError("no instances in batch")
            c = F.stack(crops)
            return self.proj(c.reshape(c.shape[0], -1))
        if regions is None:
            raise ValueError("pixel granularity needs label maps")
        return pool_by_class(self.proj(feats["C2"]), np.asarray(regions))


class _PixelHead(Module):
    def __init__(self, cin: int, hidden: int, dim: int, rng):
        super().__init__()
        self.conv1 = Conv2d(cin, hidden, 1, rng)
        self.conv2 = Conv2d(hidden, dim, 1, rng)

    def forward(self, x):
        return self.conv2(F.relu(self.conv1(x)))


def pool_by_class(feats: Tensor, label_maps: np.ndarray) -> Tensor:
    """Average features over pixels of each class present, per image, ordered by (image, class).

    Label maps at image resolution are sampled at the feature-grid centres;
    0 is background and is skipped.
    """
    n, d, h, w = feats.shape
    stride = label_maps.shape[-1] // w
    lab = label_maps[:, stride // 2::stride, stride // 2::stride]
    rows = []
    for b in range(n):
        for c in np.unique(lab[b]):
            if c == 0:
                continue
            mask = (lab[b] == c).astype(feats.dtype)
            wgt = Tensor(mask / mask.sum())
            rows.append((feats[b] * wgt).sum(axis=(1, 2)))
    if not rows:
        raise ValueError("no labelled pixels in batch")
    return F.stack(rows)


def sample_contrastive(x_q: Tensor, x_k: Tensor, granularity: str, online: ContrastNet, momentum: ContrastNet,
                       history: FeatureHistory, tau: float = 0.2, regions=None, m: float = 0.99,
                       update: bool = True) -> Tensor:
    """InfoNCE of f_q against its key f_k (positive) and the history (negatives).

    With ``update`` the keys are pushed to the history (FIFO) and the
    momentum network moves towards the online one.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    if online.granularity != granularity or momentum.granularity != granularity:
        raise ValueError("networks were built for a different granularity")
    q = F.normalize(online(x_q, regions))
    with no_grad():
        k = F.normalize(momentum(x_k, regions)).data
    pos = (q * Tensor(k)).sum(axis=1, keepdims=True)
    negs = history.items()
    logits = pos if len(negs) == 0 else F.concat([pos, q @ Tensor(negs.T.astype(q.dtype))], axis=1)
    loss = F.cross_entropy(logits * (1.0 / tau), np.zeros(q.shape[0], dtype=np.int64))
    if update:
        history.push(k)
        momentum_update(momentum.parameters(), online.parameters(), m)
    return loss


# -- FD score ------------------------------------------------------------------------------------

def _psd_eigvals(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition with eigenvalues below numerical rank set to zero."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    tol = len(vals) * np.finfo(np.float64).eps * float(np.abs(vals).max())
    return np.where(vals > tol, vals, 0.0), vecs


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = _psd_eigvals(mat)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fd_score(feats_a, feats_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature shapes {a.shape} and {b.shape} are incompatible")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("fd_score needs at least two samples per side")
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    # Tr sqrt(A B) is the nuclear norm of sqrt(A) sqrt(B); its singular values do not depend on argument order
    cross = np.linalg.svd(_sqrt_psd(ca) @ _sqrt_psd(cb), compute_uv=False).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2 * cross)
    return max(d, 0.0)
