import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multistage.tensor import (
    F, LRSchedule, NonFiniteGradientError, NonScalarLossError, Optimizer, OptimizerState, Parameter, Tape,
    Tensor, backward, clip_grad_norm, grad, lr_at, optimizer_step,
)
from multistage.tensor import checkpoint
from multistage.tensor.gradcheck import check_grads


def t64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def test_quadratic_grad():
    w = Tensor([1.0, 2.0], requires_grad=True)
    g = grad((w * w).sum(), [w])[0]
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_independent_param_gets_zero():
    w = Tensor([1.0, 2.0], requires_grad=True)
    v = Tensor([3.0], requires_grad=True)
    gmap = backward(None, (v * v).sum(), [w, v])
    np.testing.assert_array_equal(gmap[id(w)], [0.0, 0.0])


def test_non_scalar_loss_rejected():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NonScalarLossError):
        backward(None, w * 2)


def test_explicit_tape_matches_graph_walk():
    rng = np.random.default_rng(0)
    a, b = t64(rng, 3, 4), t64(rng, 4, 2)
    with Tape() as tape:
        loss = F.gelu(a @ b).sum()
    assert len(tape) > 0
    g1 = backward(tape, loss)
    g2 = backward(None, loss)
    for k in g2:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((5, 4)), dtype=np.float64)
    w1, w2, w3 = t64(rng, 4, 6), t64(rng, 6, 6), t64(rng, 6, 3)

    def fn():
        h = (x @ w1).tanh()
        h = F.gelu(h @ w2)
        return F.cross_entropy(h @ w3, [0, 1, 2, 0, 1])

    assert check_grads(fn, [w1, w2, w3]) < 1e-4


OPS = {
    "matmul": lambda a, b: (a @ b.transpose(1, 0)).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "softmax": lambda a, b: (F.softmax(a, -1) * b).sum(),
    "log_softmax": lambda a, b: (F.log_softmax(a, 0) * b).sum(),
    "layernorm": lambda a, b: (F.layer_norm(a, b[0], b[1]) * b).sum(),
    "batchnorm": lambda a, b: (F.batch_norm(a, b[0], b[1])[0] * b).sum(),
    "cosine": lambda a, b: F.cosine_similarity(a, b).sum(),
    "concat": lambda a, b: (F.concat([a, b], 1) ** 2).sum(),
    "max": lambda a, b: (a.max(axis=1) * b.sum(axis=1)).sum(),
    "sigmoid": lambda a, b: (a.sigmoid() * b).sum(),
    "exp_log": lambda a, b: ((a * a + 1.0).log() + (b * 0.1).exp()).sum(),
    "sqrt_abs": lambda a, b: ((a * a + 0.5).sqrt() * b.abs()).sum(),
    "relu": lambda a, b: (F.relu(a) * b).sum(),
    "where": lambda a, b: F.where(a.data > 0, a * b, b).sum(),
    "getitem": lambda a, b: (a[np.array([0, 2, 2]), 1:] * b[0, 1:]).sum(),
    "mse": lambda a, b: F.mse(a, b),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_and_dense_ops_gradcheck(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = t64(rng, 3, 4), t64(rng, 3, 4)
    fn = lambda: OPS[name](a, b)
    assert check_grads(fn, [a, b]) < 1e-4


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
def test_conv2d_gradcheck(stride, padding, k):
    rng = np.random.default_rng(3)
    x, w, b = t64(rng, 2, 3, 6, 6), t64(rng, 4, 3, k, k), t64(rng, 4)
    r = rng.standard_normal(F.conv2d(x, w, b, stride, padding).shape)
    assert check_grads(lambda: (F.conv2d(x, w, b, stride, padding) * r).sum(), [x, w, b]) < 1e-4


def test_depthwise_conv_gradcheck():
    rng = np.random.default_rng(4)
    x, w = t64(rng, 2, 3, 5, 5), t64(rng, 3, 1, 3, 3)
    r = rng.standard_normal((2, 3, 3, 3))
    assert check_grads(lambda: (F.conv2d(x, w, None, 2, 1, groups=3) * r).sum(), [x, w]) < 1e-4


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_pool_upsample_bilinear_gradcheck():
    rng = np.random.default_rng(6)
    x = t64(rng, 2, 2, 4, 4)
    r1 = rng.standard_normal((2, 2, 2, 2))
    assert check_grads(lambda: (F.avg_pool2d(x, 2) * r1).sum(), [x]) < 1e-4
    assert check_grads(lambda: (F.max_pool2d(x, 2) * r1).sum(), [x]) < 1e-4
    r2 = rng.standard_normal((2, 2, 8, 8))
    assert check_grads(lambda: (F.upsample_nearest(x, 2) * r2).sum(), [x]) < 1e-4
    m = t64(rng, 3, 5, 5)
    ys, xs = rng.uniform(0, 4, (2, 3)), rng.uniform(0, 4, (2, 3))
    r3 = rng.standard_normal((3, 2, 3))
    assert check_grads(lambda: (F.bilinear_sample(m, ys, xs) * r3).sum(), [m]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    w = t64(rng, 3, 3)
    x = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
    l1 = lambda: F.gelu(x @ w).sum()
    l2 = lambda: (w * w).sum()
    combined = grad(l1() * a + l2() * b, [w])[0]
    separate = a * grad(l1(), [w])[0] + b * grad(l2(), [w])[0]
    np.testing.assert_allclose(combined, separate, atol=1e-6)


def test_forward_and_grad_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        w = Parameter(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        loss = F.conv2d(x, w, None, 1, 1).gelu().mean()
        return loss.data.tobytes(), grad(loss, [w])[0].tobytes()
    assert run() == run()


# -- optimizers ----------------------------------------------------------

def test_plain_sgd_step():
    p = Parameter(np.array([1.0]))
    state = OptimizerState("sgd")
    optimizer_step(state, [p], [np.array([0.5])], lr=0.1)
    assert p.data[0] == pytest.approx(0.95)


def test_adamw_zero_grad_leaves_params():
    p = Parameter(np.array([1.0, -2.0]))
    state = OptimizerState("adamw", weight_decay=0.0)
    for _ in range(5):
        optimizer_step(state, [p], [np.zeros(2)], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_nesterov_matches_hand_recurrence():
    # f(w) = 0.5 * k * w^2, g = k * w
    k, lr, mu = 3.0, 0.05, 0.9
    p = Parameter(np.array([2.0]), dtype=np.float64)
    state = OptimizerState("sgd_nesterov", momentum=mu)
    w, buf = 2.0, None
    for _ in range(2):
        g = k * w
        buf = g if buf is None else mu * buf + g
        w_next = w - lr * (g + mu * buf)
        optimizer_step(state, [p], [np.array([k * p.data[0]])], lr=lr)
        w = w_next
    assert p.data[0] == pytest.approx(w, abs=1e-15)


def test_nan_gradient_names_parameter():
    p = Parameter(np.array([1.0]))
    with pytest.raises(NonFiniteGradientError) as err:
        optimizer_step(OptimizerState("sgd"), [p], [np.array([np.nan])], lr=0.1, names=["head.w"])
    assert err.value.param_id == "head.w"


def test_clip_grad_norm():
    p = Parameter(np.array([3.0, 4.0]))
    p.grad = np.array([3.0, 4.0], dtype=np.float32)
    total = clip_grad_norm([p], 1.0)
    assert total == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-5)


def test_optimizer_groups_apply_separate_decay():
    a, b = Parameter(np.array([1.0])), Parameter(np.array([1.0]))
    opt = Optimizer([{"params": [a], "weight_decay": 0.0}, {"params": [b], "weight_decay": 1.0}], "sgd", lr=0.1)
    a.grad = np.zeros(1, np.float32)
    b.grad = np.zeros(1, np.float32)
    opt.step()
    assert a.data[0] == 1.0 and b.data[0] == pytest.approx(0.9)


# -- schedules -------------------------------------------------------------

def test_cosine_midpoint():
    assert lr_at(LRSchedule("cosine", 1.0, 100), 50) == pytest.approx(0.5)


def test_multistep_at_eighty_percent():
    assert lr_at(LRSchedule("multistep", 0.1, 100), 80) == pytest.approx(0.01)


def test_polynomial_end_is_zero():
    assert lr_at(LRSchedule("polynomial", 1.0, 100), 100) == 0.0


def test_warmup_linear_and_clamp():
    s = LRSchedule("constant", 0.2, 100, warmup_steps=10)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 5) == pytest.approx(0.1)
    assert lr_at(s, 500) == lr_at(s, 100)


@given(st.sampled_from(["cosine", "multistep", "polynomial", "constant"]), st.integers(0, 99))
def test_lr_positive_before_end(kind, step):
    assert lr_at(LRSchedule(kind, 0.3, 100), step) > 0


# -- checkpoints ----------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": rng.standard_normal(5),
               "idx": np.arange(4, dtype=np.int64)}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, tensors, stage="expert", arch="abc", metadata={"seed": 1})
    loaded, manifest = checkpoint.load(path, expect_arch="abc")
    assert manifest.stage == "expert" and manifest.metadata == {"seed": 1}
    for k, v in tensors.items():
        assert loaded[k].dtype == v.dtype
        assert loaded[k].tobytes() == v.tobytes()
    with pytest.raises(checkpoint.ArchitectureMismatch):
        checkpoint.load(path, expect_arch="other")
