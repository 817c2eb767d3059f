import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multistage import data as D
from multistage.amateur import build_encoder_pair, AmateurConfig
from multistage.expert import (
    DatasetDescriptor, ExpertConfig, batch_quotas, build_expert, detect, expert_losses, expert_step,
    make_optimizer, merge_label_spaces, partition_batch, train_expert, training_proposals,
)
from multistage.tensor import grad


@pytest.fixture(scope="module")
def suite():
    return D.gen_task_suite(0, n=64, tasks=("classification", "patchwise", "pixelwise"))


def cls_sets(suite, k=2):
    cl = suite["classification"]
    out, descs = {}, []
    for i in range(k):
        sub = cl.subset(np.arange(i, len(cl), k), f"ds{i}")
        out[f"ds{i}"] = sub
        descs.append(DatasetDescriptor(f"ds{i}", "classification", tuple(f"c{j}" for j in range(16)), len(sub)))
    return descs, out


def test_single_dataset_degenerates(suite):
    descs, _ = cls_sets(suite, 1)
    ex = build_expert("classification", descs)
    assert list(ex.heads) == ["ds0"]


def test_three_heads_one_trunk(suite):
    d1, _ = cls_sets(suite, 1)
    d3, _ = cls_sets(suite, 3)
    e1 = build_expert("classification", d1)
    e3 = build_expert("classification", d3)
    assert len(e3.heads) == 3
    n1 = sum(p.data.size for p in e1.trunk_parameters())
    n3 = sum(p.data.size for p in e3.trunk_parameters())
    assert n1 == n3
    head_ids = {id(p) for h in e3.heads.values() for p in h.parameters()}
    assert not head_ids & {id(p) for p in e3.trunk_parameters()}


def test_task_type_mismatch():
    with pytest.raises(ValueError):
        build_expert("classification", [DatasetDescriptor("a", "classification", ("x",)),
                                        DatasetDescriptor("b", "pixelwise", ("y",))])


def test_quota_largest_remainder():
    assert batch_quotas({"a": 300, "b": 100}, 8) == {"a": 6, "b": 2}
    assert batch_quotas({"a": 1, "b": 1, "c": 1}, 8) == {"a": 3, "b": 3, "c": 2}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=6), st.integers(0, 256))
def test_quotas_sum_to_total(sizes, total):
    q = batch_quotas({f"d{i}": s for i, s in enumerate(sizes)}, total)
    assert sum(q.values()) == total
    exact = [total * s / sum(sizes) for s in sizes]
    assert all(abs(v - e) < 1 for v, e in zip(q.values(), exact))


def test_partition_single_dataset_is_identity():
    samples = [("a", i) for i in range(5)]
    groups = partition_batch(samples)
    assert list(groups) == ["a"] and groups["a"] == samples


def test_foreign_head_gradients_exactly_zero(suite):
    descs, data = cls_sets(suite, 2)
    ex = build_expert("classification", descs)
    groups = {"ds0": data["ds0"].subset(range(6)), "ds1": data["ds1"].subset(range(5))}
    _, parts = expert_losses(ex, groups, np.random.default_rng(0))
    g = grad(parts["ds0"], ex.heads["ds1"].parameters())
    assert all(np.all(x == 0) for x in g)
    g_own = grad(parts["ds0"], ex.heads["ds0"].parameters())
    assert any(np.any(x != 0) for x in g_own)


def test_empty_group_leaves_head_unchanged(suite):
    descs, data = cls_sets(suite, 2)
    ex = build_expert("classification", descs)
    opt = make_optimizer(ex, ExpertConfig())
    before = {k: v.copy() for k, v in ex.heads["ds1"].state_dict().items()}
    groups = {"ds0": data["ds0"].subset(range(6)), "ds1": data["ds1"].subset([])}
    expert_step(ex, groups, opt, 1e-2)
    for k, v in ex.heads["ds1"].state_dict().items():
        np.testing.assert_allclose(v, before[k], rtol=1e-7, atol=1e-12)


def test_identical_datasets_give_identical_head_gradients(suite):
    descs, data = cls_sets(suite, 2)
    ex = build_expert("classification", descs)
    ex.heads["ds1"].load_state_dict(ex.heads["ds0"].state_dict())
    batch = data["ds0"].subset(range(4))
    _, parts = expert_losses(ex, {"ds0": batch, "ds1": batch}, np.random.default_rng(0))
    ga = grad(parts["ds0"], ex.heads["ds0"].parameters())
    gb = grad(parts["ds1"], ex.heads["ds1"].parameters())
    for a, b in zip(ga, gb):
        np.testing.assert_array_equal(a, b)


def test_weight_decay_defaults():
    assert ExpertConfig().weight_decay == 1e-8
    descs = [DatasetDescriptor("a", "pixelwise", ("x", "y"))]
    ex = build_expert("pixelwise", descs)
    groups = ex.param_groups(1e-8, head_decay=1e-3)
    assert groups[0]["weight_decay"] == 1e-8 and groups[1]["weight_decay"] == 1e-3
    assert groups[1]["name"] == "head:a"


def test_label_space_schemes():
    a = DatasetDescriptor("a", "classification", ("cat", "dog", "car"))
    b = DatasetDescriptor("b", "classification", ("kitten", "bus", "tree", "sky"))
    nat = merge_label_spaces([a, b], "natural")
    np.testing.assert_array_equal(nat.maps["a"], [0, 1, 2])
    np.testing.assert_array_equal(nat.maps["b"], [0, 1, 2, 3])
    uni = merge_label_spaces([a, b], "unified")
    assert uni.size == 7
    assert len(set(uni.maps["a"]) | set(uni.maps["b"])) == 7
    part = merge_label_spaces([a, b], "partially_merged", [(("a", "cat"), ("b", "kitten"))])
    assert part.size == 6
    assert part.maps["a"][0] == part.maps["b"][0]
    with pytest.raises(KeyError):
        merge_label_spaces([a, b], "partially_merged", [(("a", "cow"), ("b", "bus"))])


def test_unified_expert_shares_one_head(suite):
    descs, data = cls_sets(suite, 2)
    ex = build_expert("classification", descs, scheme="unified")
    assert list(ex.heads) == ["global"]
    assert ex.heads["global"].fc.weight.shape[0] == 32


def test_trunk_init_from_amateur_checkpoint(tmp_path):
    from multistage.tensor import checkpoint as ckpt
    pair = build_encoder_pair(AmateurConfig(), np.random.default_rng(5))
    state = {"backbone." + k: v for k, v in pair.backbone.state_dict().items()}
    path = tmp_path / "amateur.ckpt"
    ckpt.save(path, state, "amateur", "x")
    ex = build_expert("classification", [DatasetDescriptor("a", "classification", ("x", "y"))], path)
    for k, v in ex.backbone.state_dict().items():
        assert v.tobytes() == state["backbone." + k].tobytes()


def test_training_is_deterministic_and_learns(suite):
    descs, data = cls_sets(suite, 2)
    cfg = ExpertConfig(steps=6, batch=12, lr=5e-3)
    runs = [train_expert(build_expert("classification", descs), data, cfg, seed=1) for _ in range(2)]
    assert runs[0].losses == runs[1].losses
    a = runs[0].expert.state_dict()
    b = runs[1].expert.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_patch_and_pixel_experts_step(suite):
    pt = suite["patchwise"]
    ex = build_expert("patchwise", [DatasetDescriptor("p", "patchwise", tuple(map(str, range(16))), len(pt))])
    run = train_expert(ex, {"p": pt}, ExpertConfig(steps=2, batch=4), seed=0)
    assert np.isfinite(run.losses[-1]["p"])
    dets = detect(ex, pt.images[:2], "p", scales=(16,), step=16)
    assert len(dets) == 2 and all(b.shape[1] == 4 for b, _, _ in dets)
    px = suite["pixelwise"]
    ex = build_expert("pixelwise", [DatasetDescriptor("s", "pixelwise", tuple(map(str, range(16))), len(px))])
    run = train_expert(ex, {"s": px}, ExpertConfig(steps=2, batch=4, grad_clip=4.0), seed=0)
    assert np.isfinite(run.losses[-1]["s"])


def test_training_proposals_mark_ground_truth_positive(suite):
    pt = suite["patchwise"].subset([0, 1])
    props, cls_t, box_t = training_proposals(pt, np.random.default_rng(0), 64)
    n_gt = len(pt.boxes[0])
    np.testing.assert_array_equal(cls_t[:n_gt], pt.box_labels[0] + 1)
    np.testing.assert_allclose(box_t[:n_gt], 0, atol=1e-12)
