"""General-operator blocks, the stage-structured backbone, FPN and task heads."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import BatchNorm, Conv2d, F, Linear, Module, Tensor

OPERATORS = ("conv", "dwconv", "self_attention", "local_self_attention")
LEVELS = ("C2", "C3", "C4", "C5")
LEVEL_STRIDES = {"C2": 4, "C3": 8, "C4": 16, "C5": 32, "P2": 4, "P3": 8, "P4": 16, "P5": 32, "P6": 64}


@dataclass(frozen=True)
class BlockConfig:
    operator: str
    channels: int
    expansion: int = 4
    window: int | None = None

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}")
        if self.expansion not in (2, 3, 4, 5, 6):
            raise ValueError(f"expansion must be in 2..6, got {self.expansion}")
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        if self.operator == "local_self_attention" and not self.window:
            raise ValueError("local self-attention needs a window size")


@dataclass(frozen=True)
class StageSpec:
    blocks: tuple[BlockConfig, ...]
    stride: int
    out_channels: int

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("a stage needs at least one block")
        if self.stride not in (1, 2):
            raise ValueError("stage stride must be 1 or 2")


@dataclass(frozen=True)
class StageRecord:
    """One line of an architecture description file."""
    operator: str
    expansion: int
    repeats: int
    channels: int
    stride: int


@dataclass
class FeatureMapSet:
    maps: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Tensor:
        if key not in self.maps:
            raise KeyError(f"feature level {key} missing (have {sorted(self.maps)})")
        return self.maps[key]

    def __setitem__(self, key: str, value: Tensor) -> None:
        self.maps[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self.maps

    def keys(self):
        return self.maps.keys()


# -- architecture files -------------------------------------------------------

# Desk-scale default: stem /2, then six stages reaching /4, /8, /16, /16, /32.
DEFAULT_STEM = 8
DEFAULT_ARCH = (
    StageRecord("conv", 2, 1, 8, 1),
    StageRecord("conv", 2, 1, 12, 2),
    StageRecord("conv", 2, 1, 16, 2),
    StageRecord("transformer", 2, 1, 16, 2),
    StageRecord("transformer", 2, 1, 16, 1),
    StageRecord("transformer", 2, 1, 24, 2),
)


def write_arch_file(path: str | os.PathLike, records, stem_channels: int = DEFAULT_STEM) -> None:
    with open(path, "w") as fh:
        json.dump({"stem_channels": stem_channels, "stages": [asdict(r) for r in records]}, fh, indent=2)
        fh.write("\n")


def read_arch_file(path: str | os.PathLike) -> tuple[tuple[StageRecord, ...], int]:
    with open(path) as fh:
        doc = json.load(fh)
    records = tuple(StageRecord(**r) for r in doc["stages"])
    if len(records) != 6:
        raise ValueError(f"architecture file needs 6 stage records, got {len(records)}")
    return records, int(doc.get("stem_channels", DEFAULT_STEM))


def stages_from_records(records, window: int | None = None) -> list[StageSpec]:
    stages = []
    for r in records:
        op = {"transformer": "self_attention"}.get(r.operator, r.operator)
        if op == "self_attention" and window:
            op = "local_self_attention"
        blocks = tuple(BlockConfig(op, r.channels, r.expansion, window if op == "local_self_attention" else None)
                       for _ in range(max(1, r.repeats)))
        stages.append(StageSpec(blocks, r.stride, r.channels))
    return stages


# -- general operator blocks ------------------------------------------------

class GOPConvBlock(Module):
    """y = x + Proj_down(Conv(Proj_up(x))), GELU after each of the first two maps."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c, ec = cfg.channels, cfg.channels * cfg.expansion
        self.proj_up = Conv2d(c, ec, 1, rng)
        groups = ec if cfg.operator == "dwconv" else 1
        self.conv = Conv2d(ec, ec, 3, rng, groups=groups)
        self.proj_down = Conv2d(ec, c, 1, rng)
        self.proj_down.weight.data *= 0.5

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.channels:
            raise ValueError(f"block expects {self.cfg.channels} channels, got {x.shape[1]}")
        h = F.gelu(self.proj_up(x))
        h = F.gelu(self.conv(h))
        return x + self.proj_down(h)


def attention_heads(channels: int) -> int:
    """max(1, c // 16), lowered until it divides the channel count."""
    h = max(1, channels // 16)
    while channels % h:
        h -= 1
    return h


class GOPAttnBlock(Module):
    """y' = x + SA(x); y = y' + FFN(y') on the flattened spatial tokens."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.heads = attention_heads(c)
        self.qkv = Linear(c, 3 * c, rng)
        self.out = Linear(c, c, rng)
        self.ffn_up = Linear(c, c * cfg.expansion, rng)
        self.ffn_down = Linear(c * cfg.expansion, c, rng)
        self.out.weight.data *= 0.5
        self.ffn_down.weight.data *= 0.5

    def attention(self, tokens: Tensor) -> Tensor:
        """Multi-head self-attention over (B, T, C) tokens, output projection included."""
        b, t, c = tokens.shape
        h, d = self.heads, c // self.heads
        qkv = self.qkv(tokens).reshape(b, t, 3, h, d).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        o = F.dropout_free_attention(q, k, v)
        return self.out(o.transpose(0, 2, 1, 3).reshape(b, t, c))

    def forward(self, x: Tensor) -> Tensor:
        n, c, hh, ww = x.shape
        if c != self.cfg.channels:
            raise ValueError(f"block expects {self.cfg.channels} channels, got {c}")
        if self.cfg.operator == "local_self_attention":
            w = self.cfg.window
            if hh % w or ww % w:
                raise ValueError(f"window {w} does not divide {hh}x{ww}")
            tokens = (x.reshape(n, c, hh // w, w, ww // w, w).transpose(0, 2, 4, 3, 5, 1)
                      .reshape(n * (hh // w) * (ww // w), w * w, c))
        else:
            tokens = x.reshape(n, c, hh * ww).transpose(0, 2, 1)
        y1 = tokens + self.attention(tokens)
        y = y1 + self.ffn_down(F.gelu(self.ffn_up(y1)))
        if self.cfg.operator == "local_self_attention":
            w = self.cfg.window
            return (y.reshape(n, hh // w, ww // w, w, w, c).transpose(0, 5, 1, 3, 2, 4)
                    .reshape(n, c, hh, ww))
        return y.transpose(0, 2, 1).reshape(n, c, hh, ww)


def make_block(cfg: BlockConfig, rng: np.random.Generator) -> Module:
    if cfg.operator in ("conv", "dwconv"):
        return GOPConvBlock(cfg, rng)
    return GOPAttnBlock(cfg, rng)


def gop_conv_block(x: Tensor, block: GOPConvBlock) -> Tensor:
    return block(x)


def gop_attn_block(x: Tensor, block: GOPAttnBlock) -> Tensor:
    return block(x)


# -- backbone ------------------------------------------------------------------

class ConvBNAct(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, bias=False)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return F.gelu(self.bn(self.conv(x)))


class Stage(Module):
    def __init__(self, cin: int, spec: StageSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.transition = ConvBNAct(cin, spec.out_channels, spec.stride, rng) \
            if (spec.stride != 1 or cin != spec.out_channels) else None
        self.blocks = [make_block(b, rng) for b in spec.blocks]

    def forward(self, x):
        if self.transition is not None:
            x = self.transition(x)
        for b in self.blocks:
            x = b(x)
        return x


class Backbone(Module):
    """Stem (stride 2) followed by stages; emits C2..C5 at strides 4..32.

    Each C level is the output of the last stage running at that stride.
    """

    def __init__(self, stages: list[StageSpec], rng: np.random.Generator, stem_channels: int = DEFAULT_STEM,
                 in_channels: int = 3):
        super().__init__()
        self.stem = ConvBNAct(in_channels, stem_channels, 2, rng)
        self.stages = []
        cin, stride = stem_channels, 2
        self.stage_strides = []
        for spec in stages:
            if spec.blocks[0].channels != spec.out_channels:
                raise ValueError("block channels must equal the stage's out_channels")
            self.stages.append(Stage(cin, spec, rng))
            cin = spec.out_channels
            stride *= spec.stride
            self.stage_strides.append(stride)
        self.level_stage = {}
        for lvl in LEVELS:
            idx = [i for i, s in enumerate(self.stage_strides) if s == LEVEL_STRIDES[lvl]]
            if not idx:
                raise ValueError(f"stage layout never reaches stride {LEVEL_STRIDES[lvl]} for {lvl}")
            self.level_stage[lvl] = idx[-1]
        self.channels = {lvl: stages[i].out_channels for lvl, i in self.level_stage.items()}
        self.stem_channels = stem_channels

    def forward(self, x: Tensor) -> FeatureMapSet:
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} not divisible by 32")
        feats = FeatureMapSet()
        x = self.stem(x)
        wanted = {i: lvl for lvl, i in self.level_stage.items()}
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in wanted:
                feats[wanted[i]] = x
        return feats


def backbone_forward(x: Tensor, backbone: Backbone) -> FeatureMapSet:
    return backbone(x)


def build_backbone(records=DEFAULT_ARCH, rng: np.random.Generator | None = None,
                   stem_channels: int = DEFAULT_STEM, window: int | None = None) -> Backbone:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Backbone(stages_from_records(records, window), rng, stem_channels)


# -- feature pyramid ---------------------------------------------------------------

class FPN(Module):
    """Top-down pyramid with 1x1 laterals and 3x3 output convs; P6 from a stride-2 conv."""

    def __init__(self, in_channels: dict[str, int], out_channels: int, rng: np.random.Generator,
                 p6_channels: int | None = None):
        super().__init__()
        self.out_channels = out_channels
        self.lateral = {lvl: Conv2d(in_channels[lvl], out_channels, 1, rng) for lvl in LEVELS}
        self.output = {lvl: Conv2d(out_channels, out_channels, 3, rng) for lvl in LEVELS}
        self.p6 = Conv2d(p6_channels or in_channels["C5"], out_channels, 3, rng, stride=2)

    def forward(self, c: FeatureMapSet, p6_source: Tensor | None = None) -> FeatureMapSet:
        for lvl in LEVELS:
            if lvl not in c:
                raise KeyError(f"FPN input missing {lvl}")
        top = None
        inner = {}
        for lvl in reversed(LEVELS):
            lat = self.lateral[lvl](c[lvl])
            top = lat if top is None else lat + F.upsample_nearest(top, 2)
            inner[lvl] = top
        out = FeatureMapSet(dict(c.maps))
        for lvl in LEVELS:
            out["P" + lvl[1]] = self.output[lvl](inner[lvl])
        out["P6"] = self.p6(c["C5"] if p6_source is None else p6_source)
        return out


def fpn_forward(c: FeatureMapSet, fpn: FPN) -> FeatureMapSet:
    return fpn(c)


def sync_batchnorm(groups, bn: BatchNorm | None = None, eps: float = 1e-5):
    """Normalize ``groups`` with statistics shared across all of them.

    With ``bn`` given its affine parameters are applied and its running
    statistics updated; returns (outputs, (mean, var)).
    """
    if bn is None:
        return F.sync_batchnorm(groups, None, None, eps)
    outs, stats = F.sync_batchnorm(groups, bn.weight, bn.bias, bn.eps)
    bn._update_running(*stats, int(sum(g.size // g.shape[1] for g in groups)))
    return outs, stats


# -- heads ---------------------------------------------------------------------------

class ClassificationHead(Module):
    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(channels, num_classes, rng)

    def forward(self, feat: Tensor) -> Tensor:
        return self.fc(F.global_avg_pool(feat))


class DenseHead(Module):
    """Two-layer conv predictor: 3x3 conv, ReLU, 1x1 conv."""

    def __init__(self, channels: int, out_channels: int, rng: np.random.Generator, hidden: int = 16):
        super().__init__()
        self.conv1 = Conv2d(channels, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, out_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(F.relu(self.conv1(x)))


class BoxHead(Module):
    """Class logits and box deltas from RoI-aligned features."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator, pool: int = 7,
                 hidden: int = 32):
        super().__init__()
        self.fc = Linear(channels * pool * pool, hidden, rng)
        self.cls = Linear(hidden, num_classes + 1, rng)
        self.box = Linear(hidden, 4, rng)

    def forward(self, roi_feats: Tensor) -> tuple[Tensor, Tensor]:
        h = F.relu(self.fc(roi_feats.reshape(roi_feats.shape[0], -1)))
        return self.cls(h), self.box(h)
