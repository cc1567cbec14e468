import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisyfl.data import NoiseSpec, generate_blobs, inject_noise, PartitionPlan
from noisyfl.model import LossSpec, ModelSpec, grad, init_params, sgd_step
from noisyfl.numcore import RngStream
from noisyfl.strategy import (ClientState, StrategySpec, coteach_select, keep_ratio,
                              local_train, num_kept)

MODEL = ModelSpec("mlp-1h", feature_dim=2, hidden_dim=8, num_classes=4)


def dataset(n=200, seed=0):
    return generate_blobs(n, 4, 2, 0.5, RngStream(seed))


def client(shard, seed=0, cid=0):
    return ClientState(cid, np.asarray(shard, dtype=np.int64), RngStream(seed, 100 + cid))


def run(spec, shard=None, ds=None, t=0, total=10, seed=0, params=None):
    ds = ds if ds is not None else dataset()
    shard = np.arange(len(ds)) if shard is None else shard
    params = params if params is not None else init_params(MODEL, RngStream(seed))
    return local_train(client(shard, seed), params, spec, t, total, ds, MODEL), params, ds


class TestLocalTrain:
    @pytest.mark.parametrize("kind", ["plain", "prox", "sce", "coteach"])
    def test_zero_lr_returns_global(self, kind):
        res, g, _ = run(StrategySpec(kind=kind, lr=0.0, epochs=2))
        assert res.params == g

    def test_one_batch_matches_manual_step(self):
        ds = dataset()
        shard = np.arange(0, 40)
        spec = StrategySpec(epochs=1, batch_size=64, lr=0.05, momentum=0.9, weight_decay=1e-3)
        g = init_params(MODEL, RngStream(1))
        state = client(shard, seed=3)
        res = local_train(state, g, spec, 4, 10, ds, MODEL)
        order = shard[state.rng.derive(4).permutation(shard.size)]
        _, grad_vec = grad(g, MODEL, ds.features[order], ds.observed_labels[order], LossSpec())
        expected, _ = sgd_step(g, grad_vec, 0.05, None, 0.9, 1e-3)
        np.testing.assert_allclose(res.params.values, expected.values, rtol=0, atol=1e-14)
        assert res.stats.steps == 1 and res.stats.n_k == 40

    def test_step_count(self):
        res, _, _ = run(StrategySpec(epochs=3, batch_size=64))
        assert res.stats.steps == 3 * 4  # ceil(200 / 64) = 4

    def test_prox_stays_closer_to_global(self):
        wins = 0
        for seed in range(10):
            ds = dataset(seed=seed)
            g = init_params(MODEL, RngStream(seed))
            kw = dict(epochs=5, lr=0.1, batch_size=32)
            plain, _, _ = run(StrategySpec(**kw), ds=ds, params=g, seed=seed)
            prox, _, _ = run(StrategySpec(kind="prox", mu=1.0, **kw), ds=ds, params=g, seed=seed)
            d_plain = np.linalg.norm(plain.params.values - g.values)
            d_prox = np.linalg.norm(prox.params.values - g.values)
            wins += d_prox < d_plain
        assert wins > 5

    def test_does_not_mutate_inputs(self):
        ds = dataset()
        g = init_params(MODEL, RngStream(0))
        before = g.values.copy()
        labels = ds.observed_labels.copy()
        run(StrategySpec(epochs=2), ds=ds, params=g)
        np.testing.assert_array_equal(g.values, before)
        np.testing.assert_array_equal(ds.observed_labels, labels)

    @pytest.mark.parametrize("kind", ["plain", "sce", "coteach"])
    def test_deterministic(self, kind):
        a, _, _ = run(StrategySpec(kind=kind, epochs=2), t=3, seed=5)
        b, _, _ = run(StrategySpec(kind=kind, epochs=2), t=3, seed=5)
        assert a.params == b.params

    def test_round_changes_batch_order(self):
        a, _, _ = run(StrategySpec(epochs=1, batch_size=16), t=1)
        b, _, _ = run(StrategySpec(epochs=1, batch_size=16), t=2)
        assert a.params != b.params

    def test_svd_first_loss_dominates_base(self):
        res, _, _ = run(StrategySpec(svd_weight=0.1, epochs=1))
        assert res.stats.first_loss >= res.stats.first_base_loss
        plain, _, _ = run(StrategySpec(epochs=1))
        assert plain.stats.first_loss == pytest.approx(plain.stats.first_base_loss)

    def test_empty_shard_warns_and_skips(self, caplog):
        with caplog.at_level(logging.WARNING):
            res, g, _ = run(StrategySpec(), shard=np.array([], dtype=np.int64))
        assert res.stats.skipped and res.stats.n_k == 0
        assert res.params == g
        assert "empty shard" in caplog.text

    def test_single_sample_shard_with_svd(self):
        res, _, _ = run(StrategySpec(svd_weight=0.1, epochs=2), shard=np.array([3]))
        assert np.all(np.isfinite(res.params.values))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            StrategySpec(kind="mixup")
        with pytest.raises(ValueError):
            StrategySpec(forget_rate=1.0)
        with pytest.raises(ValueError):
            StrategySpec(kind="prox", mu=0.0)


class TestKeepRatio:
    def test_examples(self):
        assert keep_ratio(0, 100, 0.2, 0.2) == 1.0
        assert keep_ratio(10, 100, 0.2, 0.2) == pytest.approx(0.9)
        assert keep_ratio(20, 100, 0.2, 0.2) == pytest.approx(0.8)
        assert keep_ratio(99, 100, 0.2, 0.2) == pytest.approx(0.8)

    def test_no_warmup(self):
        assert keep_ratio(0, 100, 0.3, 0.0) == pytest.approx(0.7)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 200), st.integers(1, 200), st.floats(0, 0.99), st.floats(0, 1))
    def test_monotone_and_bounded(self, t, total, forget, warm):
        k0 = keep_ratio(t, total, forget, warm)
        k1 = keep_ratio(t + 1, total, forget, warm)
        assert 1 - forget - 1e-12 <= k1 <= k0 <= 1.0

    def test_num_kept(self):
        assert num_kept(0.8, 5) == 4
        assert num_kept(0.9, 64) == 58
        assert num_kept(0.01, 3) == 1


class TestCoteachSelect:
    def test_example(self):
        la = [0.1, 0.9, 0.5, 0.3, 0.7]
        lb = [0.8, 0.2, 0.4, 0.6, 0.1]
        for_a, for_b = coteach_select(la, lb, 0.6)
        assert for_a.tolist() == [1, 2, 4]  # smallest under b
        assert for_b.tolist() == [0, 2, 3]  # smallest under a

    def test_ties_prefer_lower_index(self):
        for_a, for_b = coteach_select([1.0, 1.0, 1.0, 1.0], [2.0, 2.0, 2.0, 2.0], 0.5)
        assert for_a.tolist() == [0, 1] and for_b.tolist() == [0, 1]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50)), min_size=1, max_size=40),
           st.floats(0.05, 1.0))
    def test_sort_oracle(self, pairs, keep):
        la = [a for a, _ in pairs]
        lb = [b for _, b in pairs]
        for_a, for_b = coteach_select(la, lb, keep)
        k = len(for_a)
        assert k == len(for_b) == num_kept(keep, len(pairs))
        assert sorted(for_a.tolist()) == sorted(sorted(range(len(lb)), key=lambda i: (lb[i], i))[:k])
        assert sorted(for_b.tolist()) == sorted(sorted(range(len(la)), key=lambda i: (la[i], i))[:k])

    def test_rejects_mismatch(self):
        with pytest.raises(ValueError):
            coteach_select([1.0, 2.0], [1.0], 0.5)


class TestCoteaching:
    def test_keep_one_selects_everything(self):
        spec = StrategySpec(kind="coteach", forget_rate=0.0, epochs=1)
        res, _, _ = run(spec)
        for a, b in res.stats.selections:
            assert a.size == b.size
        total = sum(a.size for a, _ in res.stats.selections)
        assert total == 200

    def test_clean_data_clean_fraction_one(self):
        res, _, _ = run(StrategySpec(kind="coteach", epochs=1))
        assert res.stats.clean_fraction == 1.0

    def test_peer_differs_from_uploaded(self):
        res, g, _ = run(StrategySpec(kind="coteach", epochs=1))
        assert res.peer_params is not None and res.peer_params != res.params

    def test_peer_offset_reused_across_rounds(self):
        ds = dataset()
        g = init_params(MODEL, RngStream(0))
        state = client(np.arange(200), seed=2)
        spec = StrategySpec(kind="coteach", epochs=1)
        local_train(state, g, spec, 0, 10, ds, MODEL)
        first = state.peer_offset.copy()
        local_train(state, g, spec, 1, 10, ds, MODEL)
        np.testing.assert_array_equal(state.peer_offset, first)
        assert np.abs(first).max() <= 1e-2 * MODEL.init_scale

    def test_selection_prefers_clean_after_warmup(self):
        ds = generate_blobs(400, 4, 2, 0.5, RngStream(0))
        noisy = inject_noise(ds, PartitionPlan((np.arange(400),)), NoiseSpec("symmetric", 0.4, 0.4), RngStream(1))
        g = init_params(MODEL, RngStream(0))
        state = client(np.arange(400), seed=1)
        warm = StrategySpec(kind="coteach", epochs=10, lr=0.05, forget_rate=0.4)
        local_train(state, g, warm, 0, 2, noisy, MODEL)
        res = local_train(state, state.params, warm, 1, 2, noisy, MODEL)
        assert res.stats.clean_fraction > 1 - noisy.corrupted.mean()
