import warnings

import numpy as np
import pytest

from lmrec.data import Dataset, LandmarkMetadata, SyntheticSpec, generate_synthetic, make_rng, partition_by_region
from lmrec.network import forward, init_centers, init_network
from lmrec.training import (FIRST_STAGE_ALPHAS, LATER_STAGE_ALPHAS, LandmarkEmbedder, TrainingConfig,
                            curriculum_train, embed, sample_batches, train_stage)


def test_sample_batches_proportion():
    y = np.concatenate([np.ones(1000, int), np.full(3000, 2)])
    idx = np.concatenate(list(sample_batches(y, 1, 32, 0.4, make_rng(0))))
    assert np.sum(y[idx] == 1) == 1000
    assert np.sum(y[idx] == 2) == 400
    assert np.unique(idx).size == idx.size


def test_sample_batches_zero_proportion():
    y = np.array([1, 1, 2, 3, 3, 3])
    for b in sample_batches(y, 2, 2, 0.0, make_rng(0)):
        assert np.all(y[b] <= 2)


def test_sample_batches_deterministic_and_drops_singletons():
    y = np.array([1] * 5 + [2] * 10)
    a = [b.tolist() for b in sample_batches(y, 1, 3, 0.4, make_rng(3))]
    b = [b.tolist() for b in sample_batches(y, 1, 3, 0.4, make_rng(3))]
    assert a == b
    assert all(len(x) >= 2 for x in a)
    assert sum(len(x) for x in a) == 6  # 5 + 2 drawn, the trailing singleton dropped


def test_sample_batches_reuses_small_pool():
    y = np.array([1] * 10 + [2] * 2)
    idx = np.concatenate(list(sample_batches(y, 1, 100, 0.4, make_rng(0))))
    assert np.sum(y[idx] == 2) == 4


def _toy(seed=0, n_per=40):
    rng = make_rng(seed)
    X = np.concatenate([rng.normal(-2, 0.5, (n_per, 2)), rng.normal(2, 0.5, (n_per, 2)),
                        rng.normal(0, 3, (n_per, 2))])
    y = np.repeat([1, 2, 3], n_per)
    return Dataset(X, y, 2)


def test_zero_epochs_leaves_net_unchanged():
    data = _toy()
    cfg = TrainingConfig(epochs=0, hidden=(4,), dim=2)
    net = init_network(make_rng(0), 2, (4,), 2, 3)
    before = net.copy()
    centers = init_centers(make_rng(1), 2, 2)
    net2, c2, report = train_stage(net, centers.copy(), data, cfg, FIRST_STAGE_ALPHAS, make_rng(2))
    assert all(np.array_equal(net2.params[k], before.params[k]) for k in before.params)
    assert np.array_equal(c2, centers) and report.total == []


def test_separable_toy_reaches_high_accuracy():
    rng = make_rng(4)
    X = np.concatenate([rng.normal(-2, 0.3, (100, 2)), rng.normal(2, 0.3, (100, 2))])
    data = Dataset(X, np.repeat([1, 2], 100), 1)  # class 2 is the non-landmark class
    cfg = TrainingConfig(epochs=30, hidden=(8,), dim=4, first_alphas=(0.05, 0.05, 0.05))
    net = init_network(make_rng(0), 2, (8,), 4, 2)
    net, _, report = train_stage(net, init_centers(make_rng(1), 1, 4), data, cfg, cfg.first_alphas, make_rng(2))
    _, logits, _ = forward(net, X)
    assert np.mean(logits.argmax(1) + 1 == data.y) >= 0.99
    assert report.epoch_lr_multiplier[0] == 1.0 and report.epoch_lr_multiplier[-1] == pytest.approx(0.01)


def _regions(ds, parts):
    return [LandmarkMetadata(i, "", "", "", 0.0, 0.0, p) for i, p in parts.items()]


def test_single_stage_curriculum_equals_train_stage():
    data = _toy()
    cfg = TrainingConfig(epochs=3, hidden=(4,), dim=3, seed=5)
    res = curriculum_train([data], cfg)
    rng = make_rng(5)
    net = init_network(rng, 2, (4,), 3, 3)
    centers = init_centers(rng, 2, 3)
    net2, c2, _ = train_stage(net, centers, data, cfg, cfg.first_alphas, rng)
    assert all(np.array_equal(res.net.params[k], net2.params[k]) for k in net2.params)
    assert np.array_equal(res.centers, c2)


def test_curriculum_skips_empty_parts_with_warning():
    data = _toy()
    parts = partition_by_region(data, _regions(data, {1: 1, 2: 3}))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = curriculum_train(parts, TrainingConfig(epochs=1, hidden=(4,), dim=2))
    assert len(res.reports) == 2
    assert sum("no landmark classes" in str(w.message) for w in caught) == 2
    assert res.class_ids.tolist() == [1, 2]


def test_curriculum_stage_contract():
    corpus = generate_synthetic(SyntheticSpec(n_classes=8, non_landmark_count=100, d_in=8, seed=1))
    parts = partition_by_region(corpus.dataset, corpus.metadata)
    res = curriculum_train(parts, TrainingConfig(epochs=2, hidden=(6,), dim=4), keep_snapshots=True)
    assert [r.alphas for r in res.reports] == [FIRST_STAGE_ALPHAS] + [LATER_STAGE_ALPHAS] * 3
    cumulative = np.cumsum([p.landmark_classes.size for p in parts])
    for k, (entry, _) in enumerate(res.snapshots):
        assert entry.params["cls.W"].shape == (4, cumulative[k] + 1)
    for (exit_net, _), (entry, centers) in zip(res.exits, res.snapshots[1:]):
        for name in exit_net.params:
            if name.startswith("trunk.") or name in ("embed.W", "embed.b"):
                assert np.array_equal(exit_net.params[name], entry.params[name])
        assert np.array_equal(entry.params["embed.bn_gamma"], np.ones(4))
        assert np.array_equal(entry.buffers["embed.bn_var"], np.ones(4))


def test_training_is_deterministic():
    data = _toy(2)
    cfg = TrainingConfig(epochs=2, hidden=(4,), dim=2, seed=9)
    a, b = curriculum_train([data], cfg), curriculum_train([data], cfg)
    assert all(np.array_equal(a.net.params[k], b.net.params[k]) for k in a.net.params)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(first_alphas=(0.1, 0.1))
    with pytest.raises(ValueError):
        TrainingConfig(lr_milestones=(0.8, 0.4))
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=1)


@pytest.mark.filterwarnings("ignore:curriculum part")
def test_embedder_estimator():
    data = _toy(3)
    est = LandmarkEmbedder(hidden=(4,), dim=3, epochs=2)
    est.fit(data.X, data.y)
    assert est.n_landmarks_ == 2
    Z = est.transform(data.X)
    assert Z.shape == (len(data), 3)
    assert np.array_equal(Z, embed(est.network_, data.X))
    assert set(np.unique(est.predict(data.X))) <= {1, 2, 3}
    est2 = LandmarkEmbedder(hidden=(4,), dim=3, epochs=2).fit(data.X, data.y, regions={1: 1, 2: 2})
    assert len(est2.reports_) == 2
