"""Stage dispatch for validated run specs: checkpoints, JSON-lines logs and metric files."""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as D
from . import nas
from . import pipeline as P
from .adaptation import (Classifier, Codebook, MFConfig, multi_stage_finetune, plain_finetune, predict,
                         train_rerepresenter)
from .amateur import pretrain_amateur
from .blocks import Backbone, StageRecord, build_backbone, read_arch_file
from .config import RunSpec
from .evalbench import MetricReport, ProbeProtocol, write_reports
from .expert import DatasetDescriptor, Expert, build_expert
from .generalist import Generalist, build_generalist
from .tensor import checkpoint as ckpt

CKPT_NAME = {"amateur": "amateur.ckpt", "expert": "expert.ckpt", "generalist": "generalist.ckpt",
             "adapt": "adapted.ckpt"}
METRICS_FILE = "metrics.jsonl"


# -- checkpoint metadata ---------------------------------------------------------------------------

def arch_meta(records, stem_channels: int) -> dict:
    return {"records": [asdict(r) for r in records], "stem_channels": int(stem_channels)}


def arch_from_meta(meta: dict) -> tuple[tuple[StageRecord, ...], int]:
    return tuple(StageRecord(**r) for r in meta["records"]), int(meta["stem_channels"])


def _hash(stage: str, meta: dict, state: dict) -> str:
    return ckpt.arch_hash({"stage": stage, "arch": {k: meta[k] for k in ("records", "stem_channels")},
                           "params": sorted(state)})


def save_model(path, stage: str, state: dict, meta: dict) -> None:
    ckpt.save(path, state, stage, _hash(stage, meta, state), meta)


def expert_meta(ex: Expert, scheme: str, fpn_channels: int, records, stem: int) -> dict:
    return {"task_type": ex.task_type, "datasets": [asdict(d) for d in ex.datasets], "scheme": scheme,
            "fpn_channels": fpn_channels, **arch_meta(records, stem)}


def rebuild_expert(meta: dict) -> Expert:
    records, stem = arch_from_meta(meta)
    descs = [DatasetDescriptor(d["id"], d["task_type"], tuple(d["label_names"]), d["sample_count"])
             for d in meta["datasets"]]
    return build_expert(meta["task_type"], descs, None, np.random.default_rng(0), records, stem,
                        scheme=meta["scheme"], fpn_channels=meta["fpn_channels"])


def load_model(path):
    """Rebuild whatever model a stage checkpoint holds; returns (model, manifest)."""
    man = ckpt.read_manifest(path)
    meta = man.metadata
    records, stem = arch_from_meta(meta)
    if man.stage == "amateur":
        model = build_backbone(records, np.random.default_rng(0), stem)
        state = {k[len("backbone."):]: v for k, v in ckpt.load(path)[0].items()}
        model.load_state_dict(state)
        return model, man
    if man.stage == "expert":
        model = rebuild_expert(meta)
    elif man.stage == "generalist":
        model = build_generalist([rebuild_expert(m) for m in meta["experts"]], meta["scheme"], meta["module"])
    elif man.stage == "adapt":
        model = Classifier(build_backbone(records, np.random.default_rng(0), stem), meta["num_classes"],
                           np.random.default_rng(0))
    else:
        raise ValueError(f"{path}: no model for checkpoint stage {man.stage!r}")
    state, man = ckpt.load(path, _hash(man.stage, meta, dict.fromkeys(model.state_dict())))
    model.load_state_dict(state)
    return model, man


def backbone_of(model) -> Backbone:
    """The image-level trunk of any stage's model."""
    if isinstance(model, Generalist):
        return model.branches[next(iter(model.branches))].backbone
    if isinstance(model, (Expert, Classifier)):
        return model.backbone
    return model


def backbone_init_state(path) -> tuple[dict, tuple, int]:
    model, man = load_model(path)
    records, stem = arch_from_meta(man.metadata)
    return {f"backbone.{k}": v for k, v in backbone_of(model).state_dict().items()}, records, stem


# -- helpers ---------------------------------------------------------------------------------------

def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def pipeline_config(spec: RunSpec, records=None, stem=None) -> P.PipelineConfig:
    cfg = P.PipelineConfig(seed=spec.seed, **{k: v for k, v in spec.data.items()})
    if records is None and spec.arch:
        records, stem = read_arch_file(spec.arch)
    if records is not None:
        cfg = dataclasses.replace(cfg, records=tuple(records), stem_channels=stem)
    return cfg


def _override(base, params: dict):
    names = {f.name for f in dataclasses.fields(base)}
    return dataclasses.replace(base, **{k: (tuple(v) if isinstance(v, list) else v)
                                        for k, v in params.items() if k in names})


# -- stages ----------------------------------------------------------------------------------------

def run_amateur(spec: RunSpec, out: Path) -> dict:
    cfg = pipeline_config(spec)
    acfg = _override(cfg.amateur, spec.params)
    corpus = D.gen_multimodal(spec.seed, cfg.n_corpus, cfg.size)
    res = pretrain_amateur(corpus, acfg, spec.seed, cfg.records, cfg.stem_channels,
                           local=spec.params.get("local", True))
    state = {f"backbone.{k}": v for k, v in res.pair.backbone.state_dict().items()}
    save_model(out / CKPT_NAME["amateur"], "amateur", state, {**arch_meta(cfg.records, cfg.stem_channels),
                                                             "size": cfg.size})
    write_jsonl(out / "log.jsonl", [{"step": i, "phase": "global", "loss": l} for i, l in enumerate(res.losses)]
                + [{"step": i, "phase": "local", "loss": l} for i, l in enumerate(res.local_losses)])
    return {"rollbacks": res.rollbacks, "final_loss": res.losses[-1] if res.losses else None}


def run_expert(spec: RunSpec, out: Path) -> dict:
    p = spec.params
    init, records, stem = None, None, None
    if p.get("init"):
        init, records, stem = backbone_init_state(p["init"])
    cfg = pipeline_config(spec, records, stem)
    fpn = p.get("fpn_channels", cfg.fpn_channels)
    cfg = dataclasses.replace(cfg, expert=_override(cfg.expert, p), fpn_channels=fpn)
    scheme = p.get("scheme", "natural")
    ex = P.run_expert(cfg, p["task"], init, datasets=p.get("datasets"), scheme=scheme)
    meta = {**expert_meta(ex, scheme, fpn, cfg.records, cfg.stem_channels), "size": cfg.size}
    save_model(out / CKPT_NAME["expert"], "expert", ex.state_dict(), meta)
    return {"datasets": [d.id for d in ex.datasets]}


def run_generalist(spec: RunSpec, out: Path) -> dict:
    p = spec.params
    experts, metas = [], []
    for path in p["experts"]:
        ex, man = load_model(path)
        if man.stage != "expert":
            raise ValueError(f"{path} holds a {man.stage} checkpoint, not an expert")
        experts.append(ex)
        metas.append(man.metadata)
    records, stem = arch_from_meta(metas[0])
    cfg = pipeline_config(spec, records, stem)
    cfg = dataclasses.replace(cfg, generalist=_override(cfg.generalist, p))
    scheme, module = p.get("scheme", "cross_level"), p.get("module", "non_linear")
    g = P.run_generalist(cfg, experts, scheme=scheme, module_kind=module)
    meta = {"experts": metas, "scheme": scheme, "module": module, **arch_meta(records, stem), "size": cfg.size}
    save_model(out / CKPT_NAME["generalist"], "generalist", g.state_dict(), meta)
    return {"branches": list(g.branches)}


def run_adapt(spec: RunSpec, out: Path) -> dict:
    p = spec.params
    model, man = load_model(p["init"])
    records, stem = arch_from_meta(man.metadata)
    cfg = pipeline_config(spec, records, stem)
    mf = _override(P.desk_mf_config(), p)
    percent = p.get("percent", 0.1)
    train, sel, test = P.adaptation_split(cfg, percent)
    clf = Classifier(copy.deepcopy(backbone_of(model)), D.NUM_CLASSES, np.random.default_rng([spec.seed, 3]))
    if p.get("rerepresenter") == "none":
        res = plain_finetune(clf, train, sel, mf, spec.seed, out / "grid.jsonl")
    else:
        if p.get("rerepresenter"):
            cb_state, cb_man = ckpt.load(p["rerepresenter"])
            m = cb_man.metadata
            codebook = Codebook(np.random.default_rng(0), m["codes"], m["dim"], m["hidden"], m["beta"])
            codebook.load_state_dict(cb_state)
        else:
            codebook = train_rerepresenter(P.upstream_suite(cfg)["classification"].images, K=p.get("codes", 128),
                                           steps=p.get("rerep_steps", 600), seed=spec.seed)
            ckpt.save(out / "rerepresenter.ckpt", codebook.state_dict(), "rerepresenter",
                      ckpt.arch_hash({"codebook": sorted(codebook.state_dict())}),
                      {"codes": codebook.num_codes, "dim": codebook.codes.shape[1],
                       "hidden": codebook.enc1.weight.shape[0], "beta": codebook.beta})
        res, _ = multi_stage_finetune(clf, codebook, train, sel, mf, spec.seed, out / "grid.jsonl")
    acc = float((predict(res.model, test[0]) == test[1]).mean())
    meta = {**arch_meta(records, stem), "num_classes": D.NUM_CLASSES, "size": cfg.size}
    save_model(out / CKPT_NAME["adapt"], "adapt", res.model.state_dict(), meta)
    report = MetricReport("syn-classification", f"percent:{percent}", "mf" if p.get("rerepresenter") != "none"
                          else "plain_finetune", {"test_accuracy": acc, "val_accuracy": res.val_metric}, spec.seed)
    write_reports(out / METRICS_FILE, [report])
    return {"test_accuracy": acc, "lr": res.lr, "weight_decay": res.weight_decay}


def run_benchmark(spec: RunSpec, out: Path) -> dict:
    p = spec.params
    if p.get("suite", "synthetic") != "synthetic":
        raise ValueError(f"unknown benchmark suite {p['suite']!r}; only 'synthetic' is bundled")
    model, man = load_model(p["model"])
    cfg = pipeline_config(spec, *arch_from_meta(man.metadata))
    suite = P.downstream_suite(cfg)
    protocol = ProbeProtocol(**p["probe"]) if p.get("probe") else cfg.probe
    percent = p.get("percent")
    metrics = P.probe_metrics(model, suite, protocol, percent, spec.seed)
    if not isinstance(model, Classifier):
        metrics["depth_rmse"] = P.depth_rmse(model, suite, cfg.depth_alphas)
    split = f"percent:{percent}" if percent is not None else "full"
    report = MetricReport("syn-suite", split, f"{man.stage}:linear_probe+depth_ridge", metrics, spec.seed)
    write_reports(out / METRICS_FILE, [report])
    return metrics


def train_oracle(size: int = 32, steps: int = 30, seed: int = 0):
    """Proxy accuracy: a short training run of the decoded architecture on synthetic classification."""
    suite = D.gen_task_suite(seed, 256, size, tasks=("classification",))["classification"]
    tr, va = suite.train(), suite.val()
    cfg = MFConfig(stage4_steps=steps, stage4_batch=32, augment=False)

    def oracle(arch: nas.ArchSpec) -> float:
        from .adaptation import finetune
        rng = np.random.default_rng(seed)
        clf = Classifier(build_backbone(arch.stages, rng, arch.stem_channels), suite.num_classes, rng)
        finetune(clf, tr.images, tr.labels, 0.05, 1e-4, cfg, rng)
        return float((predict(clf, va.images) == va.labels).mean())
    return oracle


def run_nas(spec: RunSpec, out: Path) -> dict:
    p = spec.params
    space = nas.SearchSpace.from_file(p["space"]) if p.get("space") else nas.SearchSpace()
    res_px = p.get("resolution", 64)
    if p.get("oracle", "surrogate") == "surrogate":
        oracle = lambda a: nas.surrogate_oracle(a, res_px)
    else:
        oracle = train_oracle(seed=spec.seed)
    result = nas.search(space, oracle, p.get("budget", 64), p.get("k", 5), spec.seed, res_px,
                        alpha=p.get("alpha", -0.07), batch=p.get("batch", 8))
    nas.write_search_log(out / "search.jsonl", result.log)
    for i, (arch, _) in enumerate(result.top):
        arch.to_file(out / f"arch_top{i}.json")
    return {"top_rewards": [r for _, r in result.top], "space_size": nas.space_size(space)}


STAGE_FN = {"amateur": run_amateur, "expert": run_expert, "generalist": run_generalist, "adapt": run_adapt,
            "benchmark": run_benchmark, "nas": run_nas}


def run(spec: RunSpec) -> dict:
    """Run one stage into ``spec.run_dir()``; returns the stage summary (also written to summary.json)."""
    out = spec.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    summary = _plain(STAGE_FN[spec.stage](spec, out))
    with open(out / "summary.json", "w") as fh:
        json.dump({"stage": spec.stage, "seed": spec.seed, **summary}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
