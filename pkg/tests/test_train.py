import dataclasses
import math

import numpy as np
import pytest

from longtail_lab import head, losses, train
from longtail_lab.catalog import PlainLayout, assign_groups, bin_of
from longtail_lab.errors import ConfigError
from longtail_lab.synthdata import Dataset
from longtail_lab.train import TrainConfig

from conftest import numeric_grad, rel_err

FAST = TrainConfig(epochs=3, batch_size=64, lr=0.01, warmup_steps=10)


def _layout(method, catalog):
    return assign_groups(catalog) if method == "bags" else PlainLayout(catalog.num_classes)


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(1, 0.01), (7, 0.01), (8, 0.001), (10, 0.001), (11, 1e-4), (12, 1e-4)])
    def test_epoch_lr(self, epoch, lr):
        assert train.epoch_lr(TrainConfig(), epoch) == pytest.approx(lr, rel=1e-12)

    def test_warmup(self):
        cfg = TrainConfig()
        assert train.step_lr(cfg, 1, 0) == pytest.approx(0.01 / 3)
        assert train.step_lr(cfg, 1, 250) == pytest.approx(0.01 * (1 / 3 + (2 / 3) * 0.5))
        assert train.step_lr(cfg, 1, 500) == pytest.approx(0.01)


class TestSgd:
    def test_zero_lr_keeps_params(self, small_dataset):
        layout = PlainLayout(small_dataset.catalog.num_classes)
        init = head.init(layout, small_dataset.feature_dim, 9)
        cfg = dataclasses.replace(FAST, lr=0.0)
        params, hist = train.train(small_dataset, layout, cfg, init_params=init)
        np.testing.assert_array_equal(params.W, init.W)
        np.testing.assert_array_equal(params.b, init.b)
        np.testing.assert_allclose(hist.epoch_loss, hist.epoch_loss[0], rtol=1e-12)

    @pytest.mark.parametrize("method,extra", [("softmax", {}), ("reweight", {}), ("focal", {}), ("bags", {"beta": 0.0})])
    def test_single_step_matches_numeric_gradient(self, small_dataset, method, extra):
        ds = small_dataset
        idx = np.array([0, int(np.flatnonzero(ds.train.labels > 0)[0])])
        tiny = Dataset(ds.config, ds.catalog, ds.train.subset(idx), ds.eval)
        layout = _layout(method, ds.catalog)
        init = head.init(layout, ds.feature_dim, 4)
        init.W += np.random.default_rng(0).normal(size=init.W.shape) * 0.3
        cfg = TrainConfig(method=method, epochs=1, batch_size=2, lr=0.05, warmup_steps=0, weight_decay=1e-2, **extra)
        params, _ = train.train(tiny, layout, cfg, init_params=init)

        h, y = tiny.train.features, tiny.train.labels
        objective = train._Objective(cfg, layout, ds.catalog, np.random.default_rng(0))

        def J_W(W):
            return objective(h @ W + init.b, y).loss + 0.5 * cfg.weight_decay * np.sum(W**2)

        def J_b(b):
            return objective(h @ init.W + b, y).loss

        want_W = init.W - cfg.lr * numeric_grad(J_W, init.W)
        want_b = init.b - cfg.lr * numeric_grad(J_b, init.b)
        assert rel_err(params.W - init.W, want_W - init.W) <= 1e-6
        assert rel_err(params.b - init.b, want_b - init.b) <= 1e-6


class TestTrain:
    @pytest.mark.parametrize("method", ["softmax", "bags", "reweight", "focal"])
    def test_loss_decreases(self, small_dataset, method):
        cfg = dataclasses.replace(FAST, method=method, epochs=4, beta=2.0)
        _, hist = train.train(small_dataset, _layout(method, small_dataset.catalog), cfg)
        assert hist.epoch_loss[-1] < hist.epoch_loss[0]
        assert all(math.isfinite(v) for v in hist.epoch_loss)

    def test_deterministic(self, small_dataset):
        layout = assign_groups(small_dataset.catalog)
        cfg = dataclasses.replace(FAST, method="bags", seed=5)
        a, _ = train.train(small_dataset, layout, cfg)
        b, _ = train.train(small_dataset, layout, cfg)
        np.testing.assert_array_equal(a.W, b.W)

    def test_seed_matters(self, small_dataset):
        layout = PlainLayout(small_dataset.catalog.num_classes)
        a, _ = train.train(small_dataset, layout, dataclasses.replace(FAST, seed=1))
        b, _ = train.train(small_dataset, layout, dataclasses.replace(FAST, seed=2))
        assert not np.array_equal(a.W, b.W)

    def test_features_untouched(self, small_dataset):
        before = small_dataset.train.features.copy()
        train.train(small_dataset, PlainLayout(small_dataset.catalog.num_classes), FAST)
        np.testing.assert_array_equal(before, small_dataset.train.features)

    def test_step_count(self, small_dataset):
        _, hist = train.train(small_dataset, PlainLayout(small_dataset.catalog.num_classes), FAST)
        assert hist.steps == FAST.epochs * math.ceil(len(small_dataset.train) / FAST.batch_size)

    def test_method_layout_mismatch(self, small_dataset):
        with pytest.raises(ConfigError):
            train.train(small_dataset, PlainLayout(small_dataset.catalog.num_classes), dataclasses.replace(FAST, method="bags"))
        with pytest.raises(ConfigError):
            train.train(small_dataset, assign_groups(small_dataset.catalog), FAST)

    def test_unknown_method(self, small_dataset):
        with pytest.raises(ConfigError, match="softmax"):
            train.train(small_dataset, PlainLayout(13), dataclasses.replace(FAST, method="nope"))

    def test_tail_finetune_needs_init(self, small_dataset):
        with pytest.raises(ConfigError):
            train.train(small_dataset, PlainLayout(13), dataclasses.replace(FAST, method="tail_finetune"))

    def test_tail_finetune_runs(self, small_dataset):
        layout = PlainLayout(small_dataset.catalog.num_classes)
        base, _ = train.train(small_dataset, layout, FAST)
        params, hist = train.train(small_dataset, layout, dataclasses.replace(FAST, method="tail_finetune"), base)
        assert not np.array_equal(base.W, params.W)
        assert params.meta["method"] == "tail_finetune"

    def test_config_round_trip(self):
        cfg = TrainConfig(method="bags", beta=3.0, lr_decay_epochs=(2, 3))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"bogus": 1})


class TestRfs:
    def test_factor_examples(self):
        # 1000 images; category 1 in every image, category 2 at frequency t / 4.
        images = {i: {1} for i in range(1000)}
        images[0] = {1, 2}
        f = train.rfs_repeat_factors(images, t=0.004)
        assert f[1] == 1.0
        assert f[0] == pytest.approx(2.0)

    def test_frequent_category_is_one(self):
        images = {0: {1}, 1: {1}, 2: set()}
        assert train.rfs_repeat_factors(images, t=0.5) == {0: 1.0, 1: 1.0, 2: 1.0}

    def test_expand_integer_factors(self, rng):
        assert train.rfs_expand({0: 1.0, 1: 3.0}, rng) == [0, 1, 1, 1]

    def test_expand_monte_carlo(self):
        factors = {i: 1.0 + (i % 7) / 7 for i in range(2000)}
        want = sum(factors.values())
        r = np.random.default_rng(0)
        sizes = [len(train.rfs_expand(factors, r)) for _ in range(200)]
        assert abs(np.mean(sizes) - want) / want <= 0.01

    def test_rfs_training_runs(self, small_dataset):
        cfg = dataclasses.replace(FAST, sampler="rfs", rfs_t=0.05)
        _, hist = train.train(small_dataset, PlainLayout(13), cfg)
        assert hist.epoch_loss[-1] < hist.epoch_loss[0]


class TestTailFilter:
    def test_keeps_background_and_tail(self, small_dataset):
        ds = small_dataset
        split = train.tail_finetune_filter(ds, ds.catalog, 2)
        for y in np.unique(split.labels):
            assert y == 0 or bin_of(ds.catalog.count(int(y))) <= 2
        assert np.sum(split.labels == 0) == np.sum(ds.train.labels == 0)

    def test_threshold_one(self, small_dataset):
        ds = small_dataset
        split = train.tail_finetune_filter(ds, ds.catalog, 1)
        fg = split.labels[split.labels > 0]
        assert all(ds.catalog.count(int(y)) < 10 for y in fg)

    def test_bad_threshold(self, small_dataset):
        with pytest.raises(ConfigError):
            train.tail_record_mask(small_dataset, small_dataset.catalog, 3)


def test_bags_objective_is_bags_loss(small_dataset):
    # The dispatch should hand bags its own rng-driven plan.
    layout = assign_groups(small_dataset.catalog)
    cfg = TrainConfig(method="bags", beta=0.0)
    obj = train._Objective(cfg, layout, small_dataset.catalog, np.random.default_rng(0))
    z = np.zeros((3, layout.logit_dim))
    y = np.array([0, 0, 0])
    assert obj(z, y).loss == pytest.approx(losses.bags_loss(z, y, layout, 0.0, np.random.default_rng(0)).loss)
