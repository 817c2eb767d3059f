import itertools
import math
import time

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multistage import nas
from multistage.blocks import Backbone, StageRecord, stages_from_records
from multistage.nas import (
    ArchSpec, ControllerPolicy, PPOState, SearchSpace, decode, encode, flops, ppo_surrogate,
    ppo_update, reward, sample, sample_batch, scale_model, search, space_size,
)
from multistage.tensor import F, Tensor, grad

BASE = tuple(StageRecord("conv", 2, 2, 32, s) for s in (1, 2, 2, 2, 1, 2))
SPACE = SearchSpace(base=BASE)
IDENTITY = [0, 0, 2, 2] * 6


def test_default_space_size():
    t0 = time.perf_counter()
    n = space_size(SearchSpace())
    assert time.perf_counter() - t0 < 1e-3
    assert n == 244_140_625_000_000 == 250 ** 6


def test_trivial_and_two_stage_space_sizes():
    one = SearchSpace(("conv",), (2,), (0,), (1.0,), BASE)
    assert space_size(one) == 1
    two = SearchSpace(base=BASE[:2])
    assert space_size(two) == 62_500


def test_decode_identity_shift():
    arch = decode(IDENTITY, SPACE)
    assert [(s.repeats, s.channels) for s in arch.stages] == [(2, 32)] * 6


def test_decode_repeat_clamp_and_channel_mult():
    toks = list(IDENTITY)
    toks[2] = 0   # r = -2 on base repeats 2
    toks[3] = 1   # c = 0.75 on base channels 32
    arch = decode(toks, SPACE)
    assert arch.stages[0].repeats == 1
    assert arch.stages[0].channels == 24


def test_decode_rejects_out_of_range():
    with pytest.raises(ValueError):
        decode([0] * 23, SPACE)
    with pytest.raises(ValueError):
        decode([2] + [0] * 23, SPACE)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 4), st.integers(1, 4), st.integers(0, 4)),
                min_size=6, max_size=6))
def test_encode_decode_roundtrip(choices):
    # r index >= 1 keeps base 2 + shift >= 1, i.e. inside the clamp-free range
    toks = [t for c in choices for t in c]
    arch = decode(toks, SPACE)
    assert decode(encode(arch, SPACE), SPACE) == arch
    assert encode(arch, SPACE) == toks


def test_single_conv_macs():
    assert nas.conv_macs(3, 16, 16, 8, 8) == 147_456


def brute_force_conv_macs(k, cin, cout, h, w):
    count = 0
    for _o, _y, _x in itertools.product(range(cout), range(h), range(w)):
        for _c, _i, _j in itertools.product(range(cin), range(k), range(k)):
            count += 1
    return count


def test_conv_macs_vs_enumeration():
    assert brute_force_conv_macs(3, 16, 16, 8, 8) == nas.conv_macs(3, 16, 16, 8, 8)


def test_zero_block_network():
    assert flops(ArchSpec(()), 64, stem=False) == 0


class _Counter:
    """Counts multiply-accumulates of the ops a real forward pass executes."""

    def __init__(self, monkeypatch):
        self.total = 0
        conv, lin, attn = F.conv2d, F.linear, F.dropout_free_attention

        def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
            out = conv(x, w, b, stride, padding, groups)
            o, cg, kh, kw = w.shape
            self.total += o * cg * kh * kw * out.shape[2] * out.shape[3] // x.shape[0] * x.shape[0] // x.shape[0]
            return out

        def linear(x, w, b=None):
            out = lin(x, w, b)
            self.total += int(np.prod(x.shape[:-1])) * w.shape[0] * w.shape[1] // self.batch
            return out

        def attention(q, k, v):
            out = attn(q, k, v)
            b, h, t, d = q.shape
            self.total += 2 * h * t * k.shape[2] * d * b // self.batch
            return out

        monkeypatch.setattr(F, "conv2d", conv2d)
        monkeypatch.setattr(F, "linear", linear)
        monkeypatch.setattr(F, "dropout_free_attention", attention)
        self.batch = 1


def test_flops_matches_layer_walk_oracle(monkeypatch):
    records = (StageRecord("conv", 2, 1, 8, 2), StageRecord("conv", 3, 1, 8, 2), StageRecord("transformer", 2, 1, 16, 2),
               StageRecord("dwconv", 4, 2, 16, 1), StageRecord("transformer", 3, 1, 32, 2),
               StageRecord("conv", 2, 1, 32, 1))
    arch = ArchSpec(records, 8)
    counter = _Counter(monkeypatch)
    bb = Backbone(stages_from_records(records), np.random.default_rng(0), stem_channels=8)
    bb.eval()
    bb(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
    assert counter.total == flops(arch, 64)


def test_two_block_toy_vs_oracle(monkeypatch):
    records = (StageRecord("conv", 2, 2, 8, 1),)
    counter = _Counter(monkeypatch)
    from multistage.blocks import Stage
    stage = Stage(8, stages_from_records(records)[0], np.random.default_rng(0))
    stage(Tensor(np.zeros((1, 8, 8, 8), np.float32)))
    assert counter.total == flops(ArchSpec(records, 8), 8, in_channels=8, stem=False)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 249), min_size=6, max_size=6), st.integers(1, 5))
def test_flops_additive_over_stages(codes, split):
    toks = [d for c in codes for d in (c % 2, (c // 2) % 5, (c // 10) % 5, (c // 50) % 5)]
    arch = decode(toks, SPACE)
    a, b = ArchSpec(arch.stages[:split]), ArchSpec(arch.stages[split:])
    res_after = 32 // math.prod(s.stride for s in a.stages)
    whole = flops(arch, 32, in_channels=8, stem=False)
    parts = flops(a, 32, in_channels=8, stem=False) + flops(b, res_after, in_channels=a.stages[-1].channels,
                                                            stem=False)
    assert whole == parts


# -- reward ---------------------------------------------------------------------------------

def test_reward_unit_factor():
    assert reward(0.8, 600e6, 600e6) == 0.8


def test_reward_high_precision():
    mpmath.mp.dps = 50
    ref = mpmath.mpf("0.8") * mpmath.power(mpmath.mpf(1) / 2, mpmath.mpf("-0.07"))
    assert abs(reward(0.8, 2 * 600e6, 600e6, -0.07) - float(ref)) < 1e-9
    assert float(ref) == pytest.approx(0.83977, abs=1e-5)


def test_reward_monotone_in_flops():
    # (t/f)^alpha with negative alpha grows with f; a positive alpha penalises cost
    fs = np.linspace(1e5, 1e8, 100)
    up = [reward(0.7, f, 1e6, -0.07) for f in fs]
    down = [reward(0.7, f, 1e6, 0.07) for f in fs]
    assert all(a < b for a, b in zip(up, up[1:]))
    assert all(a > b for a, b in zip(down, down[1:]))


@given(st.floats(0, 1), st.floats(1, 1e12), st.floats(1, 1e12))
def test_reward_alpha_zero_degenerates(a, f, t):
    assert reward(a, f, t, 0.0) == a


def test_reward_rejects_bad_accuracy():
    with pytest.raises(ValueError):
        reward(1.2, 1, 1)


# -- controller -----------------------------------------------------------------------------

def test_sample_deterministic_policy():
    pol = ControllerPolicy([2, 5, 5, 5] * 6, np.random.default_rng(0))
    target = [1, 3, 0, 4] * 6
    for head, t in zip(pol.heads, target):
        head.weight.data[...] = 0
        head.bias.data[...] = -1e4
        head.bias.data[t] = 1e4
    traj = sample(pol, np.random.default_rng(5))
    assert traj.tokens == target
    assert len(traj.tokens) == 24


def test_sample_uniform_frequencies():
    pol = ControllerPolicy([5, 2], np.random.default_rng(0))
    for head in pol.heads:
        head.weight.data[...] = 0
        head.bias.data[...] = 0
    trajs = sample_batch(pol, np.random.default_rng(1), 100_000)
    toks = np.array([t.tokens for t in trajs])
    for slot, n in enumerate((5, 2)):
        freq = np.bincount(toks[:, slot], minlength=n) / len(toks)
        assert np.all(np.abs(freq - 1 / n) < 0.02)


def test_trajectory_log_prob_is_sum_of_slots():
    pol = ControllerPolicy([2, 5, 5, 5] * 6, np.random.default_rng(3))
    traj = sample(pol, np.random.default_rng(4))
    ref = 0.0
    for s, tok in enumerate(traj.tokens):
        ref += math.log(pol.probabilities(s, traj.tokens[:s])[tok])
    assert traj.log_prob == pytest.approx(ref, abs=1e-5)
    for s in range(24):
        assert pol.probabilities(s, traj.tokens[:s]).sum() == pytest.approx(1.0, abs=1e-6)


def test_zero_advantage_leaves_policy_unchanged():
    pol = ControllerPolicy([2, 3], np.random.default_rng(0))
    before = pol.state_dict()
    trajs = sample_batch(pol, np.random.default_rng(1), 8)
    for t in trajs:
        t.reward = 0.5
    ppo_update(pol, trajs, 0.2, PPOState(baseline=0.5))
    after = pol.state_dict()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_rewarded_action_gains_probability():
    pol = ControllerPolicy([2], np.random.default_rng(0))
    rng = np.random.default_rng(1)
    state = PPOState()
    probs = [pol.probabilities(0)[1]]
    for _ in range(100):
        trajs = sample_batch(pol, rng, 8)
        for t in trajs:
            t.reward = 1.0 if t.tokens[0] == 1 else 0.0
        ppo_update(pol, trajs, 0.2, state)
        probs.append(pol.probabilities(0)[1])
    assert probs[-1] > 0.95
    smooth = np.convolve(probs, np.ones(10) / 10, mode="valid")
    assert smooth[-1] > smooth[0]
    assert np.all(np.diff(smooth[::10]) > -0.02)


def test_surrogate_gradient_zero_beyond_clip():
    logp = Tensor(np.array([0.5, -0.5, 0.05]), requires_grad=True, dtype=np.float64)
    old = np.zeros(3)
    adv = np.array([1.0, -1.0, 1.0])
    g = grad(ppo_surrogate(logp, old, adv, 0.2), [logp])[0]
    # ratio e^0.5 > 1.2 with A>0 and e^-0.5 < 0.8 with A<0: both clipped
    assert g[0] == 0.0 and g[1] == 0.0
    assert g[2] > 0


def test_ppo_rejects_empty():
    with pytest.raises(ValueError):
        ppo_update(ControllerPolicy([2], np.random.default_rng(0)), [], 0.2)


# -- search -------------------------------------------------------------------------------

def test_search_budget_equals_k_returns_all():
    res = search(SPACE, lambda a: 0.5, budget=5, k=5, seed=0)
    sampled = {tuple(r["tokens"]) for r in res.log}
    assert len(res.top) == len(sampled) == 5


@pytest.mark.parametrize("alpha", [0.0, 0.07])
def test_search_prefers_min_flops_on_mini_space(alpha):
    mini = SearchSpace(base=BASE[:2])
    fmax = max(flops(decode(list(t), mini), 64)
               for t in itertools.product(range(2), range(5), range(5), range(5), range(2), range(5), range(5),
                                          range(5)))
    oracle = lambda a: 1 - flops(a, 64) / fmax
    res = search(mini, oracle, budget=40, k=5, seed=3, resolution=64, alpha=alpha)
    # distinct token lists can decode to one arch through the repeat clamp
    sampled = {decode(r["tokens"], mini): r["flops"] for r in res.log}
    want = sorted(sampled.values())[:5]
    got = sorted(flops(a, 64) for a, _ in res.top)
    assert got == want
    rewards = [r for _, r in res.top]
    assert rewards == sorted(rewards, reverse=True)


def test_search_default_k_is_five():
    import inspect
    assert inspect.signature(search).parameters["k"].default == 5


def test_search_is_reproducible():
    a = search(SPACE, nas.surrogate_oracle, budget=16, k=3, seed=7)
    b = search(SPACE, nas.surrogate_oracle, budget=16, k=3, seed=7)
    assert a.log == b.log and a.top == b.top


def test_oracle_error_carries_arch():
    def bad(arch):
        raise RuntimeError("boom")
    with pytest.raises(nas.OracleError) as err:
        search(SPACE, bad, budget=5, k=1)
    assert isinstance(err.value.arch, ArchSpec)


# -- scaling ---------------------------------------------------------------------------------

def test_scale_identity():
    arch = decode(IDENTITY, SPACE)
    assert scale_model(arch, 1, 1) == arch


def test_scale_width_and_depth():
    arch = decode(IDENTITY, SPACE)
    wide = scale_model(arch, 1.25, 1)
    assert {s.channels for s in wide.stages} == {40}
    deep = scale_model(arch, 1, 1.5)
    assert [s.repeats for s in deep.stages] == [3] * 6
    assert [s.stride for s in deep.stages] == [s.stride for s in arch.stages]
