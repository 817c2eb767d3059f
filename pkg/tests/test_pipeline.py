import numpy as np
import pytest

from multistage import data as D
from multistage import pipeline as P
from multistage.adaptation import Classifier
from multistage.blocks import build_backbone
from multistage.generalist import build_generalist


@pytest.fixture(scope="module")
def suite():
    return D.gen_task_suite(0, 64, 32)


def test_shape_color_datasets_relabel_disjoint_halves(suite):
    descs, data = P.make_datasets(["syn-shape", "syn-color"], suite)
    cl = suite["classification"]
    shape, color = data["syn-shape"], data["syn-color"]
    assert len(shape) + len(color) == len(cl)
    np.testing.assert_array_equal(shape.labels, cl.labels[:32] // 4)
    np.testing.assert_array_equal(color.labels, cl.labels[32:] % 4)
    np.testing.assert_array_equal(shape.images, cl.images[:32])
    assert [d.num_classes for d in descs] == [4, 4]


def test_registry_errors(suite):
    with pytest.raises(KeyError, match="unknown dataset"):
        P.make_dataset("imagenet", suite)
    d, td = P.make_dataset("syn-det", suite)
    assert d.task_type == "patchwise" and len(td.boxes) == len(td)


def test_ridge_probe_recovers_linear_target():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((400, 5))
    w = np.array([0.5, -1.0, 0.0, 2.0, 0.3])
    y = x @ w + 0.7
    err, alpha = P.ridge_probe(x[:300], y[:300], x[300:], y[300:], (1e-8, 1.0, 100.0))
    assert err < 1e-5 and alpha == 1e-8
    # with uninformative features the best it can do is predict the mean
    z = rng.standard_normal((400, 3))
    err, _ = P.ridge_probe(z[:300], y[:300], z[300:], y[300:], (1e-2, 1e4))
    assert err == pytest.approx(np.sqrt(np.mean((y[300:] - y[:300].mean()) ** 2)), rel=0.05)


def _models():
    rng = np.random.default_rng(0)
    cfg = P.PipelineConfig()
    suite = P.upstream_suite(P.config_with(cfg, n_upstream=16))
    cls = P.run_expert(P.config_with(cfg, expert=P.ExpertConfig(steps=1, batch=4)), "classification", None, suite)
    det = P.run_expert(P.config_with(cfg, expert=P.ExpertConfig(steps=1, batch=4)), "patchwise", None, suite)
    gen = build_generalist([cls, det], rng=rng)
    return build_backbone(cfg.records, rng, cfg.stem_channels), cls, gen


def test_feature_shapes():
    amateur, cls, gen = _models()
    x = D.gen_multimodal(0, 3, 32).images
    c5 = amateur.channels["C5"]
    assert P.image_features(amateur, x).shape == (3, c5)
    assert P.image_features(cls, x).shape == (3, c5)
    # the generalist's image feature is the concatenated C5 of both branches
    assert P.image_features(gen, x).shape == (3, 2 * c5)
    dense = P.dense_features(amateur, x)
    assert dense.shape == (3, 8, 8, sum(amateur.channels.values()))
    clf = Classifier(amateur, 16, np.random.default_rng(0))
    np.testing.assert_array_equal(P.image_features(clf, x), P.image_features(amateur, x))


def test_features_leave_train_mode_and_are_deterministic():
    amateur, _, gen = _models()
    x = D.gen_multimodal(1, 2, 32).images
    a, b = P.dense_features(gen, x), P.dense_features(gen, x)
    np.testing.assert_array_equal(a, b)
    assert gen.training and amateur.training


def test_adaptation_split_is_percentage_shot():
    cfg = P.PipelineConfig(seed=3)
    (xtr, ytr), (xs, ys), (xt, yt) = P.adaptation_split(cfg, 0.1, n=320)
    counts = np.bincount(ytr, minlength=16)
    # 240 train images, 15 per class -> floor(1.5) = 1 each
    assert counts.tolist() == [1] * 16
    assert len(xs) + len(xt) == 80 and abs(len(xs) - len(xt)) <= 1
