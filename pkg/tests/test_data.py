import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multistage import data as D


def test_same_seed_same_corpus():
    a, b = D.gen_multimodal(3, 20, 32), D.gen_multimodal(3, 20, 32)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.captions, b.captions)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = D.gen_multimodal(4, 20, 32)
    assert not np.array_equal(a.images, c.images)


def test_default_size_and_n_check():
    c = D.gen_multimodal(0, 2)
    assert c.images.shape == (2, 3, 64, 64)
    with pytest.raises(ValueError):
        D.gen_multimodal(0, 0)


def test_red_circle_caption():
    obj = D.ObjectLatent(D.SHAPES.index("circle"), D.COLORS.index("red"), 0.3, 0.3, 0.2)
    toks = D.caption_tokens([obj])
    assert D.TOKEN["red"] in toks and D.TOKEN["circle"] in toks
    assert D.decode_caption(toks) == ["a", "near", "red", "circle", "at", "top", "left"]


def test_captions_name_latent_factors():
    c = D.gen_multimodal(1, 200, 16)
    for cap, lab in zip(c.captions, c.labels):
        words = D.decode_caption(cap)
        assert D.SHAPES[lab // 4] in words and D.COLORS[lab % 4] in words


def test_class_balance_1e4():
    labels = D.gen_multimodal(0, 10_000, 8).labels
    freq = np.bincount(labels, minlength=D.NUM_CLASSES) / len(labels)
    assert np.abs(freq - 1 / D.NUM_CLASSES).max() <= 0.02


@pytest.fixture(scope="module")
def suite():
    return D.gen_task_suite(0, 64, 32)


def test_suite_tasks_and_shapes(suite):
    assert set(suite) == {"classification", "patchwise", "pixelwise", "depth"}
    assert suite["classification"].labels.shape == (64,)
    assert suite["pixelwise"].label_maps.shape == (64, 32, 32)
    assert suite["depth"].depth.shape == (64, 32, 32)
    # the single-object classification set is class-balanced by construction
    assert np.bincount(suite["classification"].labels).tolist() == [4] * 16


def test_masks_match_boxes(suite):
    pw = suite["patchwise"]
    checked = 0
    for i in range(len(pw)):
        lm = pw.label_maps[i]
        if len(set(pw.box_labels[i].tolist())) < len(pw.box_labels[i]):
            continue    # two objects of one class share a label-map value
        checked += 1
        for box, lab in zip(pw.boxes[i], pw.box_labels[i]):
            ys, xs = np.nonzero(lm == lab + 1)
            np.testing.assert_array_equal(box, [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
    assert checked > 50


def test_scene_boxes_are_mask_rectangles():
    w = D.SyntheticWorld(5, 48)
    for _ in range(20):
        sc = w.scene(3)
        for m, b in zip(sc.masks, sc.boxes()):
            ys, xs = np.nonzero(m)
            assert tuple(b) == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


@given(st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_depth_monotone_in_distance(d1, d2):
    w = D.SyntheticWorld(0, 32, noise=0.0)
    depth = lambda d: w.render([D.ObjectLatent(0, 0, 0.5, 0.5, d)]).depth[16, 16]
    lo, hi = sorted((d1, d2))
    assert depth(lo) <= depth(hi)
    if hi - lo > 1e-5:     # beyond float32 resolution of the map
        assert depth(lo) < depth(hi)


def test_background_is_farthest(suite):
    dp = suite["depth"]
    assert dp.depth.max() == 1.0 and dp.depth.min() >= 0.2


def test_splits_disjoint_and_cover(suite):
    for td in suite.values():
        tr, va = set(td.train_idx.tolist()), set(td.val_idx.tolist())
        assert not tr & va
        assert tr | va == set(range(len(td)))


def test_suite_deterministic():
    a, b = D.gen_task_suite(2, 16, 16), D.gen_task_suite(2, 16, 16)
    for k in a:
        np.testing.assert_array_equal(a[k].images, b[k].images)
        np.testing.assert_array_equal(a[k].train_idx, b[k].train_idx)


def test_mask_tokens_only_content():
    caps = D.gen_multimodal(0, 50, 16).captions
    masked, tgt = D.mask_tokens(caps, np.random.default_rng(0), 0.3)
    hit = tgt >= 0
    assert hit.any(axis=1).all()
    assert (caps[hit] >= len(D.SPECIALS)).all()
    assert (masked[hit] == D.MASK).all()
    np.testing.assert_array_equal(masked[~hit], caps[~hit])


# -- CIFAR binary layout ------------------------------------------------------------------------

def _fake_cifar(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return D.CifarSet(rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, n))


def test_cifar_roundtrip_bytes():
    s = _fake_cifar()
    raw = s.encode()
    assert len(raw) == 20 * 3073
    back = D.parse_cifar_bytes(raw)
    np.testing.assert_array_equal(back.images, s.images)
    np.testing.assert_array_equal(back.labels, s.labels)
    assert back.encode() == raw


def test_cifar_errors(tmp_path):
    raw = _fake_cifar(2).encode()
    with pytest.raises(ValueError, match="record"):
        D.parse_cifar_bytes(raw[:-1])
    bad = bytearray(raw)
    bad[0] = 10
    with pytest.raises(ValueError, match="out of range"):
        D.parse_cifar_bytes(bytes(bad))
    with pytest.raises(FileNotFoundError):
        D.load_cifar_binary(tmp_path)


def test_cifar_directory_layout(tmp_path):
    for i in range(1, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(_fake_cifar(4, i).encode())
    (tmp_path / "test_batch.bin").write_bytes(_fake_cifar(3, 9).encode())
    out = D.load_cifar_binary(tmp_path)
    assert len(out["train"].labels) == 20 and len(out["test"].labels) == 3


def test_cifar_shaped_labels():
    lab = D.cifar_shaped_labels()
    assert len(lab) == 50_000 and np.bincount(lab).tolist() == [5000] * 10


def test_augment_shape_and_determinism():
    x = D.gen_multimodal(0, 4, 16).images
    a = D.augment(x, np.random.default_rng(1))
    b = D.augment(x, np.random.default_rng(1))
    assert a.shape == x.shape and a.dtype == x.dtype
    np.testing.assert_array_equal(a, b)
    assert np.abs(D.augment(x, np.random.default_rng(1), max_shift=0, jitter=0.0) - x).max() < 0.2
