"""Unified operator/size search: genotype encoding, MAC cost model, reward,
a recurrent PPO controller, top-k retention and model scaling.

Every stage contributes four decision slots (operator, expansion, repeat
shift, channel multiplier); a six-stage space therefore yields 24 tokens.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .blocks import DEFAULT_ARCH, DEFAULT_STEM, StageRecord
from .tensor import F, Linear, Module, Optimizer, Tensor, grad, no_grad

SLOTS = ("operator", "expansion", "repeat_shift", "channel_mult")


@dataclass(frozen=True)
class SearchSpace:
    operators: tuple[str, ...] = ("conv", "transformer")
    expansions: tuple[int, ...] = (2, 3, 4, 5, 6)
    repeat_shifts: tuple[int, ...] = (-2, -1, 0, 1, 2)
    channel_mults: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    base: tuple[StageRecord, ...] = DEFAULT_ARCH
    stem_channels: int = DEFAULT_STEM

    @property
    def num_stages(self) -> int:
        return len(self.base)

    def option_counts(self) -> list[int]:
        per = [len(self.operators), len(self.expansions), len(self.repeat_shifts), len(self.channel_mults)]
        return per * self.num_stages

    def to_file(self, path) -> None:
        doc = {"operators": list(self.operators), "expansions": list(self.expansions),
               "repeat_shifts": list(self.repeat_shifts), "channel_mults": list(self.channel_mults),
               "stem_channels": self.stem_channels, "base": [asdict(r) for r in self.base]}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_file(cls, path) -> "SearchSpace":
        with open(path) as fh:
            doc = json.load(fh)
        return cls(tuple(doc["operators"]), tuple(doc["expansions"]), tuple(doc["repeat_shifts"]),
                   tuple(doc["channel_mults"]), tuple(StageRecord(**r) for r in doc["base"]),
                   int(doc.get("stem_channels", DEFAULT_STEM)))


@dataclass(frozen=True)
class ArchSpec:
    stages: tuple[StageRecord, ...]
    stem_channels: int = DEFAULT_STEM

    def to_file(self, path) -> None:
        from .blocks import write_arch_file
        write_arch_file(path, self.stages, self.stem_channels)


def space_size(space: SearchSpace) -> int:
    return math.prod(space.option_counts())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def decode(tokens: Sequence[int], space: SearchSpace) -> ArchSpec:
    counts = space.option_counts()
    if len(tokens) != len(counts):
        raise ValueError(f"expected {len(counts)} tokens, got {len(tokens)}")
    for i, (t, n) in enumerate(zip(tokens, counts)):
        if not 0 <= int(t) < n:
            raise ValueError(f"token {i} = {t} out of range [0, {n})")
    stages = []
    for s, base in enumerate(space.base):
        o, e, r, c = (int(t) for t in tokens[4 * s:4 * s + 4])
        stages.append(StageRecord(
            operator=space.operators[o],
            expansion=space.expansions[e],
            repeats=max(1, base.repeats + space.repeat_shifts[r]),
            channels=max(1, _round_half_up(base.channels * space.channel_mults[c])),
            stride=base.stride,
        ))
    return ArchSpec(tuple(stages), space.stem_channels)


def encode(arch: ArchSpec, space: SearchSpace) -> list[int]:
    """Inverse of :func:`decode` for specs inside the clamp-free range."""
    tokens = []
    for rec, base in zip(arch.stages, space.base):
        shift = rec.repeats - base.repeats
        mult = [i for i, m in enumerate(space.channel_mults)
                if max(1, _round_half_up(base.channels * m)) == rec.channels]
        if shift not in space.repeat_shifts or not mult:
            raise ValueError(f"stage {rec} is not reachable from base {base}")
        tokens += [space.operators.index(rec.operator), space.expansions.index(rec.expansion),
                   space.repeat_shifts.index(shift), mult[0]]
    return tokens


# -- analytic cost model (multiply-accumulates) --------------------------------------

def conv_macs(k: int, cin: int, cout: int, h_out: int, w_out: int, groups: int = 1) -> int:
    return k * k * (cin // groups) * cout * h_out * w_out


def attention_macs(c: int, tokens: int, expansion: int, window_tokens: int | None = None) -> int:
    keys = tokens if window_tokens is None else window_tokens
    proj = 3 * c * c * tokens + c * c * tokens
    mix = 2 * tokens * keys * c
    ffn = 2 * c * c * expansion * tokens
    return proj + mix + ffn


def stage_macs(rec: StageRecord, cin: int, res: int, window: int | None = None) -> tuple[int, int]:
    """MACs of one stage and its output resolution."""
    total = 0
    out_res = res // rec.stride
    if rec.stride != 1 or cin != rec.channels:
        total += conv_macs(3, cin, rec.channels, out_res, out_res)
    c, ec, hw = rec.channels, rec.channels * rec.expansion, out_res * out_res
    for _ in range(max(1, rec.repeats)):
        if rec.operator in ("conv", "dwconv"):
            total += c * ec * hw
            total += conv_macs(3, ec, ec, out_res, out_res, groups=ec if rec.operator == "dwconv" else 1)
            total += ec * c * hw
        else:
            total += attention_macs(c, hw, rec.expansion, window * window if window else None)
    return total, out_res


def flops(arch: ArchSpec, input_resolution: int, in_channels: int = 3, stem: bool = True) -> int:
    """Total MACs. With ``stem=False`` the first stage reads ``in_channels`` at ``input_resolution``."""
    total = 0
    res, cin = input_resolution, in_channels
    if stem:
        if input_resolution % 32:
            raise ValueError("resolution must be divisible by 32")
        res = input_resolution // 2
        total += conv_macs(3, in_channels, arch.stem_channels, res, res)
        cin = arch.stem_channels
    for rec in arch.stages:
        macs, res = stage_macs(rec, cin, res)
        total += macs
        cin = rec.channels
    return total


def reward(acc: float, f: float, t: float, alpha: float = -0.07) -> float:
    """acc * (t / f) ** alpha."""
    if not 0.0 <= acc <= 1.0:
        raise ValueError(f"accuracy {acc} outside [0, 1]")
    if f <= 0 or t <= 0:
        raise ValueError("FLOPs and target must be positive")
    return acc * (t / f) ** alpha


# -- controller ---------------------------------------------------------------------------

class ControllerPolicy(Module):
    """Single tanh recurrent cell emitting one categorical decision per slot."""

    def __init__(self, option_counts: Sequence[int], rng: np.random.Generator, hidden: int = 64):
        super().__init__()
        self.option_counts = list(option_counts)
        self.hidden = hidden
        emb = max(self.option_counts)
        self.embed = Linear(emb, hidden, rng, bias=False)
        self.cell = Linear(hidden, hidden, rng)
        self.heads = [Linear(hidden, n, rng) for n in self.option_counts]
        for h in self.heads:
            h.weight.data *= 0.1
        self.embed.weight.data *= 0.5
        self.cell.weight.data *= 0.5

    def slot_logits(self, tokens: np.ndarray | None, batch: int, sample_rng: np.random.Generator | None = None):
        """Run the recurrence; sample when ``tokens`` is None, otherwise teacher-force.

        Returns (tokens, per-slot log-prob tensor of shape (batch, slots)).
        """
        h = Tensor(np.zeros((batch, self.hidden), np.float32))
        emb_dim = self.embed.weight.shape[1]
        chosen = np.zeros((batch, len(self.option_counts)), np.int64) if tokens is None else tokens
        logps = []
        for s, head in enumerate(self.heads):
            logits = head(h)
            lp = F.log_softmax(logits, axis=-1)
            if tokens is None:
                p = np.exp(lp.data.astype(np.float64))
                cdf = np.cumsum(p, axis=1)
                cdf[:, -1] = 1.0
                u = sample_rng.random(batch)
                chosen[:, s] = (u[:, None] >= cdf).sum(axis=1)
            logps.append(lp[np.arange(batch), chosen[:, s]].reshape(batch, 1))
            onehot = np.zeros((batch, emb_dim), np.float32)
            onehot[np.arange(batch), chosen[:, s]] = 1.0
            h = (self.embed(Tensor(onehot)) + self.cell(h)).tanh()
        return chosen, F.concat(logps, axis=1)

    def probabilities(self, slot: int, prefix: Sequence[int] = ()) -> np.ndarray:
        """Categorical of ``slot`` given earlier tokens ``prefix``."""
        with no_grad():
            toks = np.zeros((1, len(self.option_counts)), np.int64)
            toks[0, :len(prefix)] = prefix
            h = Tensor(np.zeros((1, self.hidden), np.float32))
            emb_dim = self.embed.weight.shape[1]
            for s, head in enumerate(self.heads):
                if s == slot:
                    return F.softmax(head(h), axis=-1).data[0].astype(np.float64)
                onehot = np.zeros((1, emb_dim), np.float32)
                onehot[0, toks[0, s]] = 1.0
                h = (self.embed(Tensor(onehot)) + self.cell(h)).tanh()
        raise IndexError(slot)


@dataclass
class Trajectory:
    tokens: list[int]
    log_probs: list[float]
    reward: float | None = None

    @property
    def log_prob(self) -> float:
        return float(sum(self.log_probs))


def sample_batch(policy: ControllerPolicy, rng: np.random.Generator, n: int) -> list[Trajectory]:
    with no_grad():
        toks, lp = policy.slot_logits(None, n, rng)
    return [Trajectory(toks[i].tolist(), lp.data[i].astype(np.float64).tolist()) for i in range(n)]


def sample(policy: ControllerPolicy, rng: np.random.Generator) -> Trajectory:
    return sample_batch(policy, rng, 1)[0]


def ppo_surrogate(logp_new: Tensor, logp_old: np.ndarray, adv: np.ndarray, clip_eps: float) -> Tensor:
    """Mean clipped surrogate objective (to be maximised)."""
    ratio = (logp_new - Tensor(logp_old.astype(logp_new.dtype))).exp()
    r = ratio.data
    lo, hi = 1.0 - clip_eps, 1.0 + clip_eps
    outside = (r < lo) | (r > hi)
    clipped = F.where(outside, Tensor(np.clip(r, lo, hi).astype(r.dtype)), ratio)
    a = Tensor(adv.astype(r.dtype))
    unclipped_obj = ratio * a
    clipped_obj = clipped * a
    take_unclipped = unclipped_obj.data <= clipped_obj.data
    return F.where(take_unclipped, unclipped_obj, clipped_obj).mean()


@dataclass
class PPOState:
    baseline: float | None = None
    decay: float = 0.9
    optimizer: Optimizer | None = None
    lr: float = 0.02
    epochs: int = 4


def ppo_update(policy: ControllerPolicy, trajectories: Sequence[Trajectory], clip_eps: float = 0.2,
               state: PPOState | None = None) -> PPOState:
    """Clipped-surrogate policy-gradient update; advantage = reward - EMA baseline."""
    if not trajectories:
        raise ValueError("ppo_update needs at least one trajectory")
    state = state or PPOState()
    rewards = np.array([t.reward for t in trajectories], dtype=np.float64)
    if state.baseline is None:
        state.baseline = float(rewards.mean())
    adv = rewards - state.baseline
    if state.optimizer is None:
        state.optimizer = Optimizer(policy.parameters(), "adamw", lr=state.lr, weight_decay=0.0)
    toks = np.array([t.tokens for t in trajectories], dtype=np.int64)
    old = np.array([t.log_prob for t in trajectories], dtype=np.float64)
    params = policy.parameters()
    for _ in range(state.epochs):
        _, lp = policy.slot_logits(toks, len(trajectories))
        obj = ppo_surrogate(lp.sum(axis=1), old, adv, clip_eps)
        gs = grad(-obj, params)
        for p, g in zip(params, gs):
            p.grad = g
        state.optimizer.step()
    state.baseline = state.decay * state.baseline + (1 - state.decay) * float(rewards.mean())
    return state


# -- search loop -------------------------------------------------------------------------

class OracleError(RuntimeError):
    def __init__(self, arch: ArchSpec, cause: Exception):
        super().__init__(f"accuracy oracle failed on {arch}: {cause}")
        self.arch = arch


@dataclass
class SearchResult:
    top: list[tuple[ArchSpec, float]]
    log: list[dict] = field(default_factory=list)


def search(space: SearchSpace, oracle: Callable[[ArchSpec], float], budget: int, k: int = 5, seed: int = 0,
           resolution: int = 64, target_flops: float | None = None, alpha: float = -0.07,
           batch: int = 8, clip_eps: float = 0.2, hidden: int = 64) -> SearchResult:
    """Sample ``budget`` architectures with a PPO-trained controller; keep the top-k by reward."""
    if budget < k:
        raise ValueError("budget must be at least k")
    rng = np.random.default_rng(seed)
    policy = ControllerPolicy(space.option_counts(), np.random.default_rng(seed + 1), hidden=hidden)
    if target_flops is None:
        target_flops = flops(ArchSpec(space.base, space.stem_channels), resolution)
    state = PPOState()
    best: dict[tuple, tuple[ArchSpec, float, int]] = {}
    log: list[dict] = []
    step = 0
    while step < budget:
        n = min(batch, budget - step)
        trajs = sample_batch(policy, rng, n)
        for traj in trajs:
            arch = decode(traj.tokens, space)
            f = flops(arch, resolution)
            try:
                acc = float(oracle(arch))
            except Exception as exc:  # surfaced with the offending architecture
                raise OracleError(arch, exc) from exc
            traj.reward = reward(acc, f, target_flops, alpha)
            log.append({"step": step, "tokens": traj.tokens, "flops": int(f), "acc": acc,
                        "reward": traj.reward})
            key = tuple(traj.tokens)
            if key not in best:
                best[key] = (arch, traj.reward, step)
            step += 1
        ppo_update(policy, trajs, clip_eps, state)
    ranked = sorted(best.values(), key=lambda item: (-item[1], item[2]))
    seen_arch, top = set(), []
    for arch, r, _ in ranked:
        if arch in seen_arch:
            continue
        seen_arch.add(arch)
        top.append((arch, r))
        if len(top) == k:
            break
    return SearchResult(top, log)


def surrogate_oracle(arch: ArchSpec, resolution: int = 64) -> float:
    """Deterministic accuracy stand-in: saturating in compute, mild preference for hybrids."""
    f = flops(arch, resolution)
    n_attn = sum(1 for s in arch.stages if s.operator != "conv")
    acc = 0.9 - 0.4 * math.exp(-f / 5e6) - 0.02 * abs(n_attn - len(arch.stages) / 2)
    return float(min(1.0, max(0.0, acc)))


def scale_model(base: ArchSpec, width_coeff: float = 1.0, depth_coeff: float = 1.0) -> ArchSpec:
    """Widen channels (rounded to a multiple of 8) and deepen repeats (ceil); resolution untouched."""
    if width_coeff < 1 or depth_coeff < 1:
        raise ValueError("scaling coefficients must be >= 1")
    stages = []
    for r in base.stages:
        ch = r.channels if width_coeff == 1 else max(8, int(r.channels * width_coeff + 4) // 8 * 8)
        reps = math.ceil(r.repeats * depth_coeff - 1e-9)
        stages.append(StageRecord(r.operator, r.expansion, reps, ch, r.stride))
    return ArchSpec(tuple(stages), base.stem_channels)


def write_search_log(path: str | os.PathLike, log: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

