"""Upstream-Generalist: expert backbones become branches joined by
knowledge-transfer modules; task heads read unified representations.

Every cross-branch path reads detached features, so a task loss only ever
trains its own branch, its own transfer modules and its own fusion weights.
Fusion weights and the last layer of each transfer module start at zero,
which makes a freshly built generalist reproduce each expert exactly.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .blocks import FPN, LEVELS, FeatureMapSet
from .data import TaskData
from .expert import Expert, draw_samples, partition_batch, task_loss
from .tensor import (
    BRANCH_SCHEDULES, Conv2d, F, Linear, LRSchedule, Module, Optimizer, Tensor, clip_grad_norm, no_grad,
)

BRANCH_OF_TASK = {"classification": "image_wise", "patchwise": "patch_wise", "pixelwise": "pixel_wise"}
BRANCH_ORDER = ("image_wise", "patch_wise", "pixel_wise")
SCHEMES = {
    "hard_sharing": (),
    "same_level": LEVELS,
    "low_level": ("C2", "C3"),
    "high_level": ("C4", "C5"),
    "cross_level": LEVELS,
}
MODULE_KINDS = ("non_linear", "scalable", "channel", "attention", "policy", "gating", "nddr")
IMPLEMENTED_KINDS = ("non_linear", "channel")


# -- transfer modules -----------------------------------------------------------------------

class TransferModule(Module):
    """Maps detached auxiliary features onto a main-branch stage.

    non_linear: 1x1 conv -> GELU -> 1x1 conv (zero-initialized).
    channel:    1x1 conv, squeeze-excite gate, zero-initialized 1x1 conv.
    """

    def __init__(self, kind: str, source: str, target: str, level: str, in_levels: tuple[str, ...],
                 in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        if kind not in MODULE_KINDS:
            raise ValueError(f"unknown transfer module kind {kind!r}")
        if kind not in IMPLEMENTED_KINDS:
            raise NotImplementedError(f"transfer module {kind!r} is declared but not implemented")
        self.kind, self.source, self.target, self.level = kind, source, target, level
        self.in_levels = tuple(in_levels)
        self.proj = Conv2d(in_channels, out_channels, 1, rng)
        if kind == "channel":
            mid = max(1, out_channels // 4)
            self.squeeze = Linear(out_channels, mid, rng)
            self.excite = Linear(mid, out_channels, rng)
        self.out = Conv2d(out_channels, out_channels, 1, rng, zero_init=True)

    def forward(self, aux: Tensor) -> Tensor:
        h = self.proj(aux)
        if self.kind == "non_linear":
            return self.out(F.gelu(h))
        gate = self.excite(F.relu(self.squeeze(F.global_avg_pool(h)))).sigmoid()
        return self.out(h * gate.reshape(gate.shape[0], gate.shape[1], 1, 1))


def gather_aux(aux_feats, size: int) -> Tensor:
    """Detach, resize to ``size`` (average pool down, nearest up) and concatenate."""
    maps = [F.resize_to(a.detach(), size) for a in aux_feats]
    return maps[0] if len(maps) == 1 else F.concat(maps, axis=1)


def transfer_forward(main_feat: Tensor, aux_feats, module: TransferModule, record: list | None = None) -> Tensor:
    """main + module(resized, detached aux features of stages 1..d)."""
    aux_feats = list(aux_feats)
    if len(aux_feats) != len(module.in_levels):
        raise ValueError(f"module at {module.level} expects {len(module.in_levels)} aux stages, "
                         f"got {len(aux_feats)}")
    delta = module(gather_aux(aux_feats, main_feat.shape[-1]))
    if delta.shape != main_feat.shape:
        raise ValueError(f"module output {delta.shape} does not match main feature {main_feat.shape}")
    if record is not None:
        record.append((module, main_feat.data, delta.data))
    return main_feat + delta


# -- model -----------------------------------------------------------------------------------

class Branch(Module):
    """One expert's trunk and heads, living inside the generalist."""

    def __init__(self, expert: Expert):
        super().__init__()
        self.kind = BRANCH_OF_TASK[expert.task_type]
        self.expert = copy.deepcopy(expert)

    @property
    def backbone(self):
        return self.expert.backbone

    @property
    def schedule_kind(self) -> str:
        return BRANCH_SCHEDULES[self.kind]


@dataclass
class GeneralistOutput:
    feats: dict[str, FeatureMapSet]                  # per branch, after fusion
    raw: dict[str, FeatureMapSet] = field(default_factory=dict)


class Generalist(Module):
    def __init__(self, branches: list[Branch], scheme: str, module_kind: str, rng: np.random.Generator):
        super().__init__()
        if scheme not in SCHEMES:
            raise ValueError(f"unknown connection scheme {scheme!r}")
        self.scheme, self.module_kind = scheme, module_kind
        self.branches = {}
        self.transfer = {}
        self.fusion = {}      # zero-initialized readers of other branches' C5
        for br in branches:
            self._attach(br, rng)

    # structure ---------------------------------------------------------------------------
    def _attach(self, br: Branch, rng: np.random.Generator) -> None:
        if br.kind in self.branches:
            raise ValueError(f"duplicate branch kind {br.kind}")
        if self.branches:
            ref = next(iter(self.branches.values())).backbone
            if ref.level_stage != br.backbone.level_stage:
                raise ValueError("branches must share the stage layout")
        old = list(self.branches)
        self.branches[br.kind] = br
        for other in old:
            for main, aux in ((br.kind, other), (other, br.kind)):
                self._make_modules(main, aux, rng)
                self._make_fusion(main, aux, rng)

    def add_branch(self, expert: Expert, rng: np.random.Generator) -> Branch:
        """Attach a further expert; existing parameters are left untouched."""
        br = Branch(expert)
        self._attach(br, rng)
        return br

    def _make_modules(self, main: str, aux: str, rng) -> None:
        mb, ab = self.branches[main].backbone, self.branches[aux].backbone
        for i, lvl in enumerate(LEVELS):
            if lvl not in SCHEMES[self.scheme]:
                continue
            in_levels = LEVELS[:i + 1] if self.scheme == "cross_level" else (lvl,)
            cin = sum(ab.channels[l] for l in in_levels)
            self.transfer[f"{main}<{aux}@{lvl}"] = TransferModule(
                self.module_kind, aux, main, lvl, in_levels, cin, mb.channels[lvl], rng)

    def _make_fusion(self, main: str, aux: str, rng) -> None:
        ex = self.branches[main].expert
        c_aux = self.branches[aux].backbone.channels["C5"]
        if ex.task_type == "classification":
            for key, head in ex.heads.items():
                self.fusion[f"{main}<{aux}:{key}"] = Linear(c_aux, head.fc.weight.shape[0], rng, zero_init=True)
        elif ex.task_type == "patchwise":
            self.fusion[f"{main}<{aux}:P5"] = Conv2d(c_aux, ex.fpn.out_channels, 1, rng, zero_init=True)
        else:
            for key, head in ex.heads.items():
                self.fusion[f"{main}<{aux}:{key}"] = Conv2d(c_aux, head.conv2.weight.shape[0], 1, rng,
                                                           zero_init=True)

    def modules_into(self, kind: str) -> list[TransferModule]:
        return [m for k, m in sorted(self.transfer.items()) if m.target == kind]

    def branch_parameters(self, kind: str):
        params = self.branches[kind].parameters()
        for name in sorted(self.transfer):
            if self.transfer[name].target == kind:
                params += self.transfer[name].parameters()
        for name in sorted(self.fusion):
            if name.startswith(kind + "<"):
                params += self.fusion[name].parameters()
        return params

    # forward -------------------------------------------------------------------------------
    def forward(self, x: Tensor, record: list | None = None) -> GeneralistOutput:
        """Run all branches stage by stage, fusing at the end of each level."""
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} not divisible by 32")
        kinds = [k for k in BRANCH_ORDER if k in self.branches]
        hidden = {k: self.branches[k].backbone.stem(x) for k in kinds}
        layout = self.branches[kinds[0]].backbone.level_stage
        level_at = {i: lvl for lvl, i in layout.items()}
        raw = {k: FeatureMapSet() for k in kinds}
        fused = {k: FeatureMapSet() for k in kinds}
        n_stages = len(self.branches[kinds[0]].backbone.stages)
        for i in range(n_stages):
            for k in kinds:
                hidden[k] = self.branches[k].backbone.stages[i](hidden[k])
            if i not in level_at:
                continue
            lvl = level_at[i]
            for k in kinds:
                raw[k][lvl] = hidden[k]
            for k in kinds:
                out = raw[k][lvl]
                for m in self.modules_into(k):
                    if m.level == lvl:
                        out = transfer_forward(out, [raw[m.source][l] for l in m.in_levels], m, record)
                fused[k][lvl] = out
                hidden[k] = out
        return GeneralistOutput(fused, raw)

    # unified representations ---------------------------------------------------------------
    def image_repr(self, out: GeneralistOutput) -> Tensor:
        return unified_image_repr(out.feats)

    def patch_repr(self, out: GeneralistOutput, detach_others: bool = True) -> FeatureMapSet:
        return unified_patch_repr(self, out.feats, detach_others)

    def pixel_repr(self, out: GeneralistOutput) -> FeatureMapSet:
        return unified_pixel_repr(out.feats)

    # task heads ------------------------------------------------------------------------------
    def _others(self, kind: str, feats) -> list[tuple[str, Tensor]]:
        return [(k, feats[k]["C5"].detach()) for k in BRANCH_ORDER if k in feats and k != kind]

    def head_forward(self, kind: str, ds_id: str, out: GeneralistOutput, proposals=None):
        ex = self.branches[kind].expert
        key = ex.head_key(ds_id)
        head = ex.heads[key]
        feats = out.feats
        if ex.task_type == "classification":
            logits = head(feats[kind]["C5"])
            for src, c5 in self._others(kind, feats):
                logits = logits + self.fusion[f"{kind}<{src}:{key}"](F.global_avg_pool(c5))
            return logits
        if ex.task_type == "patchwise":
            return ex.head_forward(ds_id, self.patch_repr(out), proposals)
        logits = head(feats[kind]["C2"])
        for src, c5 in self._others(kind, feats):
            extra = self.fusion[f"{kind}<{src}:{key}"](c5)
            logits = logits + F.upsample_nearest(extra, logits.shape[-1] // extra.shape[-1])
        return logits

    def task_loss(self, kind: str, ds_id: str, out: GeneralistOutput, batch: TaskData, rng) -> Tensor:
        ex = self.branches[kind].expert
        return task_loss(ex.task_type, lambda o, props=None: self.head_forward(kind, ds_id, o, props),
                         lambda lab: ex.mapping.to_global(ds_id, lab), out, batch, rng)


def _slice(out: GeneralistOutput, lo: int, hi: int) -> GeneralistOutput:
    cut = lambda fs: {k: FeatureMapSet({l: v[lo:hi] for l, v in m.maps.items()}) for k, m in fs.items()}
    return GeneralistOutput(cut(out.feats), cut(out.raw))


def unified_image_repr(feats: dict[str, FeatureMapSet]) -> Tensor:
    """Channel-wise concatenation of every branch's C5 (image, patch, pixel order)."""
    c5 = [feats[k]["C5"] for k in BRANCH_ORDER if k in feats]
    if not c5:
        raise ValueError("no branches to fuse")
    if len({t.shape[2:] for t in c5}) != 1:
        raise ValueError("C5 spatial sizes differ across branches")
    return c5[0] if len(c5) == 1 else F.concat(c5, axis=1)


def unified_patch_repr(model: Generalist, feats: dict[str, FeatureMapSet], detach_others: bool = True):
    """Patch-branch FPN with the fused C5 as the P5 source; P6 from the patch branch's C5 only.

    A 1x1 lateral over the concatenated C5 equals the sum of per-branch
    laterals, which is how it is computed here.
    """
    if "patch_wise" not in feats:
        raise ValueError("patch representation needs a patch-wise branch")
    fpn: FPN = model.branches["patch_wise"].expert.fpn
    c = feats["patch_wise"]
    inner, top = {}, None
    for lvl in reversed(LEVELS):
        lat = fpn.lateral[lvl](c[lvl])
        if lvl == "C5":
            for src in BRANCH_ORDER:
                if src in feats and src != "patch_wise":
                    c5 = feats[src]["C5"].detach() if detach_others else feats[src]["C5"]
                    lat = lat + model.fusion[f"patch_wise<{src}:P5"](c5)
        top = lat if top is None else lat + F.upsample_nearest(top, 2)
        inner[lvl] = top
    out = FeatureMapSet(dict(c.maps))
    for lvl in LEVELS:
        out["P" + lvl[1]] = fpn.output[lvl](inner[lvl])
    out["P6"] = fpn.p6(c["C5"])
    return out


def unified_pixel_repr(feats: dict[str, FeatureMapSet]) -> FeatureMapSet:
    """C2..C4 of the pixel branch (patch branch as fallback) plus the fused C5."""
    src = "pixel_wise" if "pixel_wise" in feats else "patch_wise" if "patch_wise" in feats else None
    if src is None:
        raise ValueError("pixel representation needs a pixel-wise or patch-wise branch")
    out = FeatureMapSet({lvl: feats[src][lvl] for lvl in ("C2", "C3", "C4")})
    out["C5"] = unified_image_repr(feats)
    return out


def build_generalist(experts, scheme: str = "cross_level", module_kind: str = "non_linear",
                     rng: np.random.Generator | None = None) -> Generalist:
    experts = list(experts)
    if len(experts) < 2:
        raise ValueError("a generalist joins at least two experts")
    rng = rng if rng is not None else np.random.default_rng(0)
    kinds = [BRANCH_OF_TASK[e.task_type] for e in experts]
    if len(set(kinds)) != len(kinds):
        raise ValueError(f"duplicate branch kinds {kinds}")
    order = sorted(range(len(experts)), key=lambda i: BRANCH_ORDER.index(kinds[i]))
    return Generalist([Branch(experts[i]) for i in order], scheme, module_kind, rng)


# -- optimization --------------------------------------------------------------------------

@dataclass
class GeneralistConfig:
    steps: int = 100
    batch: int = 16          # per task
    lr: float = 1e-3
    optimizer: str = "adamw"
    momentum: float = 0.9
    weight_decay: float = 1e-8
    warmup_steps: int | None = None   # None: max(10, 2% of steps)
    grad_clip: float | None = None


def warmup_for(total_steps: int) -> int:
    return max(10, int(round(0.02 * total_steps)))


def branch_schedules(model: Generalist, cfg: GeneralistConfig) -> dict[str, LRSchedule]:
    warm = warmup_for(cfg.steps) if cfg.warmup_steps is None else cfg.warmup_steps
    return {k: LRSchedule(br.schedule_kind, cfg.lr, cfg.steps, warmup_steps=warm)
            for k, br in model.branches.items()}


def make_optimizer(model: Generalist, cfg: GeneralistConfig) -> Optimizer:
    groups = [{"params": model.branch_parameters(k), "name": k} for k in model.branches]
    hyper = {"momentum": cfg.momentum} if cfg.optimizer.startswith("sgd") else {}
    return Optimizer(groups, cfg.optimizer, cfg.lr, weight_decay=cfg.weight_decay, **hyper)


def generalist_losses(model: Generalist, groups: dict[str, dict[str, TaskData]], rng):
    """Forward all task sub-batches in one pass; returns (total, {(branch, ds): loss})."""
    order = [(k, ds, g) for k in BRANCH_ORDER if k in groups for ds, g in groups[k].items() if len(g)]
    for k, _, _ in order:
        if k not in model.branches:
            raise KeyError(f"no branch routes task group {k!r}")
    if not order:
        raise ValueError("generalist step needs at least one non-empty group")
    x = Tensor(np.concatenate([g.images for _, _, g in order]))
    out = model(x)
    total, parts, lo = None, {}, 0
    for k, ds, g in order:
        sub = _slice(out, lo, lo + len(g))
        lo += len(g)
        parts[(k, ds)] = model.task_loss(k, ds, sub, g, rng)
        total = parts[(k, ds)] if total is None else total + parts[(k, ds)]
    return total, parts


def generalist_step(model: Generalist, groups, optimizer: Optimizer, step: int,
                    schedules: dict[str, LRSchedule], rng=None, grad_clip: float | None = None) -> dict:
    """One update; each branch's parameter group runs on its own schedule."""
    rng = rng if rng is not None else np.random.default_rng(0)
    total, parts = generalist_losses(model, groups, rng)
    for grp in optimizer.groups:
        grp["lr"] = schedules[grp["name"]](step)
    optimizer.zero_grad()
    total.backward()
    for p in optimizer.params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if grad_clip:
        clip_grad_norm(optimizer.params, grad_clip)
    optimizer.step()
    return {f"{k}/{ds}": float(v.data) for (k, ds), v in parts.items()}


def train_generalist(model: Generalist, data: dict[str, dict[str, TaskData]], cfg: GeneralistConfig,
                     seed: int = 0) -> list[dict]:
    """``data`` maps branch kind -> dataset id -> training split."""
    rng = np.random.default_rng(seed)
    opt = make_optimizer(model, cfg)
    scheds = branch_schedules(model, cfg)
    history = []
    model.train()
    for step in range(cfg.steps):
        groups = {}
        for kind, sets in data.items():
            sizes = {k: len(v) for k, v in sets.items()}
            tagged = draw_samples(sizes, cfg.batch, rng)
            groups[kind] = {k: sets[k].subset([i for _, i in v]) for k, v in partition_batch(tagged).items()}
        history.append(generalist_step(model, groups, opt, step, scheds, rng, cfg.grad_clip))
    return history


# -- diagnostics -------------------------------------------------------------------------------

def response_stats(model: Generalist, probe_batches, bins: int = 20, max_ratio: float = 1.0) -> dict:
    """Per module: histogram of ||module output|| / ||main feature|| per spatial position.

    Ratios above ``max_ratio`` land in the last bin; each histogram sums to 1.
    """
    ratios: dict[str, list[np.ndarray]] = {name: [] for name in model.transfer}
    names = {id(m): n for n, m in model.transfer.items()}
    was_training = model.training
    model.eval()
    with no_grad():
        for xb in probe_batches:
            record = []
            model(Tensor(np.asarray(xb)), record)
            for mod, main, delta in record:
                num = np.sqrt((delta.astype(np.float64) ** 2).sum(axis=1))
                den = np.sqrt((main.astype(np.float64) ** 2).sum(axis=1))
                ratios[names[id(mod)]].append((num / np.maximum(den, 1e-12)).ravel())
    model.train(was_training)
    edges = np.linspace(0.0, max_ratio, bins + 1)
    out = {}
    for name, rs in ratios.items():
        r = np.concatenate(rs) if rs else np.zeros(0)
        hist, _ = np.histogram(np.minimum(r, max_ratio), bins=edges)
        out[name] = {"hist": hist / max(1, hist.sum()), "edges": edges, "mean": float(r.mean()) if r.size else 0.0}
    return out
