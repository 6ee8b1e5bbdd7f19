import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singdc.metrics import compute_metrics
from singdc.model import ModelConfig, build_model, count_params
from singdc.optim import Adam
from singdc.tensor import softmax_cross_entropy
from singdc.training import (NumericError, Strategy, TrainPlan, class_weights, epoch_batches,
                             freeze_feature_extractor, predict, train, train_step)


def tiny_config(num_classes=10, **kw):
    """A four-block model on 4x4 inputs; same code paths as the real one, negligible cost."""
    return ModelConfig(input_hw=(4, 4), channels=(3, 3, 3, 3), pools=((1, 1),) * 4,
                       num_classes=num_classes, dropout=kw.pop("dropout", 0.0), **kw)


def blob_data(counts, sep=3.0, noise=1.0, seed=0):
    """Class c: input channels filled with a class-specific mean pattern plus noise."""
    rng = np.random.default_rng(seed)
    k = len(counts)
    centres = rng.standard_normal((k, 3, 1, 1)) * sep
    y = np.repeat(np.arange(k), counts)
    x = centres[y] + noise * rng.standard_normal((len(y), 3, 4, 4))
    return x.astype(np.float32), y


class TestClassWeights:
    def test_known_values(self):
        np.testing.assert_allclose(class_weights([100, 10], 1).weights, [0.01, 0.1])
        np.testing.assert_array_equal(class_weights([7, 300, 1], 0).weights, 1.0)
        assert class_weights([32], 0.2).weights[0] == 0.5

    @pytest.mark.parametrize("n", [1, 2, 3, 7, 10, 1000])
    def test_reciprocal_at_alpha_one(self, n):
        assert class_weights([n], 1).weights[0] == 1 / n

    def test_errors(self):
        with pytest.raises(ValueError):
            class_weights([3, 0], 0.5)
        with pytest.raises(ValueError):
            class_weights([3, 4], 1.5)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 10_000), min_size=2, max_size=10), st.floats(0.01, 1.0))
    def test_monotone_nonincreasing(self, counts, alpha):
        w = class_weights(counts, alpha).weights
        order = np.argsort(counts, kind="stable")
        assert np.all(np.diff(w[order]) <= 0)


class TestTrainPlan:
    def test_phase_split(self):
        p = TrainPlan(strategy="crt-wc")
        assert [(ph.name, ph.epochs, ph.weighted, ph.classifier_only) for ph in p.phases()] == \
            [("representation", 100, False, False), ("crt", 100, True, True)]
        p = TrainPlan(strategy="crt-wfc")
        assert [ph.weighted for ph in p.phases()] == [True, True]
        p = TrainPlan(strategy="joint")
        assert [(ph.name, ph.epochs) for ph in p.phases()] == [("joint", 200)]

    def test_defaults(self):
        p = TrainPlan()
        assert (p.total_epochs, p.batch_size, p.lr) == (200, 64, 1e-4)

    def test_inconsistent(self):
        with pytest.raises(ValueError):
            TrainPlan(strategy="joint", crt_epochs=10)
        with pytest.raises(ValueError):
            TrainPlan(strategy="crt-wc", total_epochs=10, crt_epochs=10)
        with pytest.raises(ValueError):
            TrainPlan(strategy="bogus")


def test_epoch_visits_every_clip_once():
    batches = epoch_batches(np.random.default_rng(0), 37, 8)
    assert [len(b) for b in batches] == [8, 8, 8, 8, 5]
    np.testing.assert_array_equal(np.sort(np.concatenate(batches)), np.arange(37))


def test_alpha_zero_weighting_equals_plain_ce():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((16, 10))
    y = rng.integers(0, 10, 16)
    w = class_weights(np.bincount(y, minlength=10) + 1, 0.0).weights
    a, ga = softmax_cross_entropy(logits, y, w[y])
    b, gb = softmax_cross_entropy(logits, y)
    assert abs(a - b) < 1e-6
    np.testing.assert_allclose(ga, gb, atol=1e-12)


@pytest.mark.parametrize("scale", [4.0, 0.25])
def test_uniform_weight_scaling_leaves_step_unchanged(scale):
    x, y = blob_data([5, 3, 2], seed=1)
    w = class_weights([5, 3, 2], 0.7).weights
    models = []
    for s in (1.0, scale):
        m = build_model(tiny_config(3, dropout=0.3), seed=0)
        opt = Adam(m.trainable_params(), lr=1e-2)
        rng = np.random.default_rng(0)
        for _ in range(3):
            train_step(m, opt, x, y, (w * s)[y], rng)
        models.append(m)
    for name, p in models[0].named_params().items():
        np.testing.assert_array_equal(p.value, models[1].named_params()[name].value)


def test_joint_training_separates_two_classes():
    x, y = blob_data([20, 20], sep=2.0, noise=0.5, seed=2)
    m = build_model(tiny_config(2), seed=0)
    res = train(m, x, y, TrainPlan(strategy="joint", alpha=0.0, total_epochs=40, batch_size=8, lr=1e-2))
    assert (predict(m, x).argmax(1) == y).mean() == 1.0
    assert res.log[-1]["train_acc"] == 1.0
    assert [r["epoch"] for r in res.log] == list(range(1, 41))


def test_counts_must_match_labels():
    x, y = blob_data([3, 2])
    with pytest.raises(ValueError):
        train(build_model(tiny_config(2)), x, y, TrainPlan(total_epochs=2), counts=[2, 3])


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(build_model(tiny_config(2)), np.zeros((0, 3, 4, 4), np.float32), np.zeros(0, int),
              TrainPlan(total_epochs=2))


def test_non_finite_loss_raises():
    x, y = blob_data([3, 2])
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        train(build_model(tiny_config(2)), x, y, TrainPlan(strategy="joint", total_epochs=1))


@pytest.mark.parametrize("strategy", ["crt-wc", "crt-wfc"])
def test_crt_freeze_contract(strategy):
    x, y = blob_data([12, 6, 3], seed=3)
    m = build_model(tiny_config(3, dropout=0.3), seed=0)
    snap = {}
    trainable = []

    def on_phase_end(name, model):
        if name == "representation":
            snap.update({k: p.value.copy() for k, p in model.extractor_params().items()})
            snap.update({k: v.copy() for k, v in model.buffers().items()})

    def on_epoch(rec):
        if rec["phase"] == "crt":
            trainable.append(sum(p.size for p in m.trainable_params()))

    plan = TrainPlan(strategy=strategy, alpha=0.5, total_epochs=8, batch_size=4, lr=1e-2)
    res = train(m, x, y, plan, on_epoch=on_epoch, on_phase_end=on_phase_end)
    for k, p in m.extractor_params().items():
        np.testing.assert_array_equal(p.value, snap[k], err_msg=k)
        assert not p.grad.any(), k
    for k, v in m.buffers().items():
        np.testing.assert_array_equal(v, snap[k], err_msg=k)
    assert trainable == [93] * 4  # fc2: 30 -> 3
    assert [r["phase"] for r in res.log] == ["representation"] * 4 + ["crt"] * 4
    assert not m.frozen


def test_full_size_classifier_has_310_trainable_scalars():
    m = build_model(ModelConfig())
    params = freeze_feature_extractor(m)
    assert sum(p.size for p in params) == 310
    m.unfreeze()
    assert sum(p.size for p in m.trainable_params()) == count_params(m).total


def test_crt_wc_phase_one_is_unweighted_joint_prefix():
    """cRT-WC's first phase is exactly joint training with alpha = 0 for the same seed."""
    x, y = blob_data([10, 5, 2], seed=4)
    a = build_model(tiny_config(3, dropout=0.3), seed=1)
    b = build_model(tiny_config(3, dropout=0.3), seed=1)
    snap = {}
    train(a, x, y, TrainPlan(strategy="crt-wc", alpha=1.0, total_epochs=6, batch_size=4, lr=1e-2),
          on_phase_end=lambda n, m: n == "representation" and snap.update(
              {k: p.value.copy() for k, p in m.named_params().items()}))
    train(b, x, y, TrainPlan(strategy="joint", alpha=0.0, total_epochs=3, batch_size=4, lr=1e-2))
    for k, p in b.named_params().items():
        np.testing.assert_array_equal(p.value, snap[k], err_msg=k)


def test_crt_wc_raises_minority_recall():
    counts = [90, 10]
    x, y = blob_data(counts, sep=0.3, noise=1.0, seed=0)
    m = build_model(tiny_config(2), seed=0)
    recalls = {}

    def on_phase_end(name, model):
        recalls[name] = compute_metrics(predict(model, x), y, 2).recall[1]

    train(m, x, y, TrainPlan(strategy="crt-wc", alpha=1.0, total_epochs=10, batch_size=16, lr=1e-2),
          on_phase_end=on_phase_end)
    assert recalls["crt"] > recalls["representation"]


def test_training_is_deterministic():
    x, y = blob_data([6, 4], seed=6)

    def run():
        m = build_model(tiny_config(2, dropout=0.3), seed=2)
        return train(m, x, y, TrainPlan(strategy="crt-wfc", alpha=0.3, total_epochs=4, batch_size=3, lr=1e-2)).log

    assert run() == run()
