"""Desk-scale pipeline: amateur -> expert -> generalist, plus the probes that compare them.

Upstream stages train on a suite drawn from one seed; downstream probes use
a suite from a different seed, so evaluation images are never seen upstream.
"""
from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .adaptation import (Classifier, Codebook, MFConfig, multi_stage_finetune, plain_finetune, predict,
                         train_rerepresenter)
from .amateur import AmateurConfig, pretrain_amateur
from .blocks import DEFAULT_ARCH, DEFAULT_STEM, LEVELS, Backbone
from .evalbench import (MetricReport, ProbeProtocol, fpr_at_recall, linear_probe, mean_per_class,
                        percentage_shot_split, rmse_depth)
from .expert import DatasetDescriptor, Expert, ExpertConfig, build_expert, train_expert
from .generalist import Generalist, GeneralistConfig, build_generalist, train_generalist
from .tensor import F, Tensor, no_grad

UPSTREAM_OFFSET = 1000      # upstream suite seed = seed + offset


@dataclass
class PipelineConfig:
    seed: int = 0
    size: int = 32
    n_corpus: int = 512
    n_upstream: int = 512
    n_downstream: int = 512
    records: tuple = DEFAULT_ARCH
    stem_channels: int = DEFAULT_STEM
    fpn_channels: int = 16
    amateur: AmateurConfig = field(default_factory=lambda: AmateurConfig(
        steps=150, batch=32, monitor_threshold=3.0, local_steps=30))
    expert: ExpertConfig = field(default_factory=lambda: ExpertConfig(steps=150, batch=32))
    generalist: GeneralistConfig = field(default_factory=lambda: GeneralistConfig(steps=100, batch=16))
    # wider decay range than the harness default: concatenated generalist features are 2x wider
    probe: ProbeProtocol = field(default_factory=lambda: ProbeProtocol(
        "quasi_newton_full_batch", wds=tuple(np.logspace(-5, -1, 5))))
    depth_alphas: tuple[float, ...] = (1e-2, 1e-1, 1.0, 10.0, 100.0)


_CLASS_NAMES = tuple(f"{s}-{c}" for s in D.SHAPES for c in D.COLORS)

# synthetic dataset registry: id -> (task type, source task in the suite, label names)
DATASETS = {
    "syn-shape": ("classification", "classification", D.SHAPES),
    "syn-color": ("classification", "classification", D.COLORS),
    "syn-class": ("classification", "classification", _CLASS_NAMES),
    "syn-det": ("patchwise", "patchwise", _CLASS_NAMES),
    "syn-seg": ("pixelwise", "pixelwise", _CLASS_NAMES),
}
DEFAULT_DATASETS = {"classification": ("syn-shape", "syn-color"), "patchwise": ("syn-det",),
                    "pixelwise": ("syn-seg",)}


def make_dataset(ds_id: str, suite: dict[str, D.TaskData]) -> tuple[DatasetDescriptor, D.TaskData]:
    """Shape and colour sets relabel disjoint halves of the classification images."""
    if ds_id not in DATASETS:
        raise KeyError(f"unknown dataset {ds_id!r}; known: {sorted(DATASETS)}")
    task, source, names = DATASETS[ds_id]
    td = suite[source]
    idx = np.arange(len(td))
    if ds_id == "syn-shape":
        idx = idx[:len(td) // 2]
    elif ds_id == "syn-color":
        idx = idx[len(td) // 2:]
    sub = td.subset(idx, ds_id)
    if ds_id == "syn-shape":
        sub.labels = sub.labels // len(D.COLORS)
    elif ds_id == "syn-color":
        sub.labels = sub.labels % len(D.COLORS)
    return DatasetDescriptor(ds_id, task, names, len(sub)), sub


def make_datasets(ids, suite) -> tuple[list[DatasetDescriptor], dict[str, D.TaskData]]:
    descs, data = [], {}
    for ds_id in ids:
        d, td = make_dataset(ds_id, suite)
        descs.append(d)
        data[ds_id] = td
    return descs, data


def expert_data(suite, task: str, ids=None):
    return make_datasets(ids or DEFAULT_DATASETS[task], suite)


# -- stages --------------------------------------------------------------------------------------

def run_amateur(cfg: PipelineConfig) -> Backbone:
    corpus = D.gen_multimodal(cfg.seed, cfg.n_corpus, cfg.size)
    res = pretrain_amateur(corpus, cfg.amateur, cfg.seed, cfg.records, cfg.stem_channels)
    return res.pair.backbone


def run_expert(cfg: PipelineConfig, task: str, init_state: dict | None, suite=None, datasets=None,
               scheme: str = "natural") -> Expert:
    suite = suite or upstream_suite(cfg)
    descs, data = expert_data(suite, task, datasets)
    ex = build_expert(task, descs, init_state, np.random.default_rng([cfg.seed, 1]), cfg.records,
                      cfg.stem_channels, scheme=scheme, fpn_channels=cfg.fpn_channels)
    train_expert(ex, data, cfg.expert, cfg.seed)
    return ex


def run_generalist(cfg: PipelineConfig, experts: list[Expert], suite=None, scheme: str = "cross_level",
                   module_kind: str = "non_linear") -> Generalist:
    suite = suite or upstream_suite(cfg)
    g = build_generalist(experts, scheme, module_kind, np.random.default_rng([cfg.seed, 2]))
    data = {}
    for br in g.branches.values():
        _, d = expert_data(suite, br.expert.task_type, [x.id for x in br.expert.datasets])
        data[br.kind] = d
    train_generalist(g, data, cfg.generalist, cfg.seed)
    return g


def upstream_suite(cfg: PipelineConfig, tasks=("classification", "patchwise", "pixelwise")):
    return D.gen_task_suite(cfg.seed + UPSTREAM_OFFSET, cfg.n_upstream, cfg.size, tasks=tasks)


def downstream_suite(cfg: PipelineConfig):
    return D.gen_task_suite(cfg.seed, cfg.n_downstream, cfg.size, tasks=("classification", "depth"))


# -- features --------------------------------------------------------------------------------------

def _batched(fn, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(fn(Tensor(images[i:i + batch])))
    return np.concatenate(out)


def _levels(model) -> callable:
    """Image -> dict of level features; generalists expose the pixel representation."""
    if isinstance(model, Generalist):
        return lambda x: model.pixel_repr(model(x)).maps
    if isinstance(model, (Expert, Classifier)):
        return lambda x: model.backbone(x).maps
    return lambda x: model(x).maps


def image_features(model, images: np.ndarray) -> np.ndarray:
    """Pooled C5 (the fused C5 for a generalist)."""
    model.eval()
    get = _levels(model)
    feats = _batched(lambda x: F.global_avg_pool(get(x)["C5"]).data, images)
    model.train()
    return feats


def dense_features(model, images: np.ndarray) -> np.ndarray:
    """C2..C5 brought to the C2 grid and concatenated: (N, H2, W2, C)."""
    model.eval()
    get = _levels(model)

    def fn(x):
        maps = get(x)
        size = maps["C2"].shape[-1]
        return np.concatenate([F.resize_to(maps[l], size).data for l in LEVELS], axis=1).transpose(0, 2, 3, 1)

    feats = _batched(fn, images)
    model.train()
    return feats


def probe_metrics(model, suite, protocol: ProbeProtocol, percent: float | None = None, seed: int = 0) -> dict:
    """Linear probe on frozen pooled features; optionally on a percentage-shot train subset."""
    cl = suite["classification"]
    tr, va = cl.train(), cl.val()
    if percent is not None:
        tr = tr.subset(percentage_shot_split(tr.labels, percent, seed, cl.name).indices)
    fva = image_features(model, va.images)
    res = linear_probe(image_features(model, tr.images), tr.labels, fva, va.labels, protocol,
                       num_classes=cl.num_classes)
    preds = res.predict(fva)
    return {"probe_accuracy": res.val_accuracy, "probe_mean_per_class": mean_per_class(preds, va.labels),
            "probe_fpr@recall0.95": fpr_at_recall(res.scores(fva), va.labels, 0.95)}


def probe_accuracy(model, suite, protocol: ProbeProtocol) -> float:
    return probe_metrics(model, suite, protocol)["probe_accuracy"]


def ridge_probe(xtr: np.ndarray, ytr: np.ndarray, xva: np.ndarray, yva: np.ndarray, alphas) -> tuple[float, float]:
    """Standardized ridge regression; returns (best val RMSE, its alpha). Ties keep the smaller alpha."""
    xtr, xva = np.asarray(xtr, np.float64), np.asarray(xva, np.float64)
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-8
    xtr, xva = (xtr - mu) / sd, (xva - mu) / sd
    ym = ytr.mean()
    gram, rhs = xtr.T @ xtr, xtr.T @ (ytr - ym)
    best = (np.inf, None)
    for a in sorted(alphas):
        w = np.linalg.solve(gram + a * len(xtr) * np.eye(len(gram)), rhs)
        err = rmse_depth(xva @ w + ym, yva)
        if err < best[0]:
            best = (float(err), float(a))
    return best


def depth_rmse(model, suite, alphas=(1e-2, 1e-1, 1.0, 10.0, 100.0)) -> float:
    """Per-pixel ridge probe from frozen dense features to depth, sampled at C2 cell centres."""
    dp = suite["depth"]
    tr, va = dp.train(), dp.val()
    ftr, fva = dense_features(model, tr.images), dense_features(model, va.images)
    stride = tr.images.shape[-1] // ftr.shape[1]
    tgt = lambda d: d[:, stride // 2::stride, stride // 2::stride].reshape(-1)
    return ridge_probe(ftr.reshape(-1, ftr.shape[-1]), tgt(tr.depth), fva.reshape(-1, fva.shape[-1]),
                       tgt(va.depth), alphas)[0]


# -- end to end ---------------------------------------------------------------------------------------

@dataclass
class StageModels:
    amateur: Backbone
    expert_cls: Expert
    expert_patch: Expert
    generalist: Generalist
    seconds: dict = field(default_factory=dict)


def run_upstream(cfg: PipelineConfig) -> StageModels:
    t = {}
    t0 = time.perf_counter()
    amateur = run_amateur(cfg)
    t["amateur"] = time.perf_counter() - t0
    init = {f"backbone.{k}": v for k, v in amateur.state_dict().items()}
    suite = upstream_suite(cfg)
    t0 = time.perf_counter()
    cls = run_expert(cfg, "classification", init, suite)
    patch = run_expert(cfg, "patchwise", init, suite)
    t["experts"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    gen = run_generalist(cfg, [cls, patch], suite)
    t["generalist"] = time.perf_counter() - t0
    return StageModels(amateur, cls, patch, gen, t)


def evaluate_stages(models: StageModels, cfg: PipelineConfig) -> list[MetricReport]:
    suite = downstream_suite(cfg)
    split = f"train:{len(suite['classification'].train_idx)}/val:{len(suite['classification'].val_idx)}"
    out = []
    for name, m in (("amateur", models.amateur), ("expert", models.expert_cls), ("generalist", models.generalist)):
        acc = probe_accuracy(m, suite, cfg.probe)
        rmse = depth_rmse(m, suite, cfg.depth_alphas)
        out.append(MetricReport("syn-suite", split, f"{name}:linear_probe+depth_ridge",
                                {"probe_accuracy": acc, "depth_rmse": rmse}, cfg.seed))
    return out


def config_with(cfg: PipelineConfig, **changes) -> PipelineConfig:
    return dataclasses.replace(cfg, **changes)


# -- adaptation comparison ---------------------------------------------------------------------------

def desk_mf_config(steps: int = 150, contrastive: bool = False) -> MFConfig:
    """Reduced grid (2 lrs x 1 wd) and step counts for CPU runs."""
    return MFConfig(stage3_steps=200, stage3_batch=32, stage3_lr_range=(1e-2, 1.0), stage4_steps=steps,
                    stage4_batch=32, stage4_lr_range=(1e-3, 1e-2), stage4_lr_count=2,
                    stage4_wd_range=(1e-4, 1e-4), stage4_wd_count=1, contrastive=contrastive)


def adaptation_split(cfg: PipelineConfig, percent: float = 0.1, n: int = 2048):
    """Percentage-shot train subset, with the val split halved into selection and test parts."""
    cl = downstream_suite(config_with(cfg, n_downstream=n))["classification"]
    tr, va = cl.train(), cl.val()
    keep = percentage_shot_split(tr.labels, percent, cfg.seed, "syn-classification").indices
    half = len(va) // 2
    return ((tr.images[keep], tr.labels[keep]), (va.images[:half], va.labels[:half]),
            (va.images[half:], va.labels[half:]))


def compare_adaptation(backbone: Backbone, cfg: PipelineConfig, mf: MFConfig | None = None,
                       percent: float = 0.1, codebook: Codebook | None = None) -> dict[str, float]:
    """Test accuracy of MF and of a plain fine-tune from the same backbone and split."""
    mf = mf or desk_mf_config()
    train, sel, test = adaptation_split(cfg, percent)
    if codebook is None:
        codebook = train_rerepresenter(upstream_suite(cfg)["classification"].images, K=128, steps=600, seed=cfg.seed)
    out = {}
    for arm in ("mf", "plain"):
        model = Classifier(copy.deepcopy(backbone), D.NUM_CLASSES, np.random.default_rng([cfg.seed, 3]))
        if arm == "mf":
            res, _ = multi_stage_finetune(model, codebook, train, sel, mf, cfg.seed)
        else:
            res = plain_finetune(model, train, sel, mf, cfg.seed)
        out[arm] = float((predict(res.model, test[0]) == test[1]).mean())
    return out
