import json
from dataclasses import replace

import numpy as np
import pytest

import noisyfl.engine as E
from noisyfl.aggregate import AggregatorSpec
from noisyfl.config import config_to_text, parse_config
from noisyfl.data import NoiseSpec
from noisyfl.model import LossSpec, grad, sgd_step
from noisyfl.numcore import RngStream
from noisyfl.strategy import StrategySpec


def small_config(**kw):
    base = dict(num_clients=6, participants=3, rounds=4, seed=1, eval_window=2,
                data=E.DataSpec(samples=240, test_samples=120, classes=3),
                model=E.ModelConfig(hidden_dim=6),
                strategy=StrategySpec(epochs=1, batch_size=32, lr=0.05))
    base.update(kw)
    return E.ExperimentConfig(**base)


class TestSampling:
    def test_all_clients(self):
        assert E.sample_clients(5, 5, 3, RngStream(0)) == [0, 1, 2, 3, 4]

    def test_repeatable(self):
        a = E.sample_clients(100, 10, 7, RngStream(4))
        assert a == E.sample_clients(100, 10, 7, RngStream(4))
        assert len(set(a)) == 10 and a == sorted(a)

    def test_rejects_oversample(self):
        with pytest.raises(ValueError):
            E.sample_clients(3, 4, 0, RngStream(0))

    def test_frequency_binomial(self):
        n, count, rounds = 20, 5, 10_000
        freq = np.zeros(n)
        rng = RngStream(11)
        for t in range(rounds):
            freq[E.sample_clients(n, count, t, rng)] += 1
        p = count / n
        sd = np.sqrt(rounds * p * (1 - p))
        assert np.all(np.abs(freq - rounds * p) <= 3 * sd + 1)


class TestMacroF1:
    def test_perfect(self):
        assert E.macro_f1([0, 1, 2, 1], [0, 1, 2, 1], 3) == 1.0

    def test_single_class_predictions(self):
        assert E.macro_f1([0, 0, 0, 0], [0, 0, 1, 1], 2) == pytest.approx(1 / 3)

    def test_absent_class_scores_zero(self):
        # class 2 never appears nor is predicted: contributes 0
        assert E.macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)

    @pytest.mark.parametrize("seed", range(5))
    def test_confusion_matrix_oracle(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 4, 300)
        p = np.where(rng.random(300) < 0.6, y, rng.integers(0, 4, 300))
        cm = E.confusion_matrix(p, y, 4)
        assert cm.sum() == 300
        f1s = []
        for c in range(4):
            tp = cm[c, c]
            prec = tp / cm[:, c].sum() if cm[:, c].sum() else 0.0
            rec = tp / cm[c, :].sum() if cm[c, :].sum() else 0.0
            f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        assert E.macro_f1(p, y, 4) == pytest.approx(np.mean(f1s), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            E.macro_f1([0, 1], [0], 2)


class TestRun:
    def test_zero_lr_constant(self):
        cfg = small_config(strategy=StrategySpec(lr=0.0, epochs=1))
        rep = E.run_experiment(cfg)
        assert len({r.test_macro_f1 for r in rep.rounds}) == 1
        assert rep.final_params == E.setup(cfg).global_params

    def test_single_client_equals_centralized_sgd(self):
        cfg = small_config(num_clients=1, participants=1, rounds=3, eval_window=1,
                           strategy=StrategySpec(epochs=2, batch_size=50, lr=0.05, momentum=0.9,
                                                 weight_decay=1e-3))
        rep = E.run_experiment(cfg)
        state = E.setup(cfg)
        w = state.global_params
        shard = state.plan.assignments[0]
        x, y = state.train.features, state.train.observed_labels
        client_rng = RngStream(cfg.seed).derive(E.STREAM_CLIENT, 0)
        for t in range(3):
            order_rng = client_rng.derive(t)
            v = None
            for _ in range(2):
                order = shard[order_rng.permutation(shard.size)]
                for s in range(0, order.size, 50):
                    b = order[s:s + 50]
                    _, g = grad(w, state.model, x[b], y[b], LossSpec())
                    w, v = sgd_step(w, g, 0.05, v, 0.9, 1e-3)
        np.testing.assert_array_equal(rep.final_params.values, w.values)

    def test_deterministic(self):
        cfg = small_config()
        a, b = E.run_experiment(cfg), E.run_experiment(cfg)
        assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
        assert E.round_rows(a.rounds) == E.round_rows(b.rounds)

    def test_workers_do_not_change_results(self):
        cfg = small_config(strategy=StrategySpec(kind="coteach", epochs=1, batch_size=32))
        a, b = E.run_experiment(cfg, workers=1), E.run_experiment(cfg, workers=3)
        assert a.to_dict() == b.to_dict()

    def test_final_f1_is_window_mean(self):
        cfg = small_config(rounds=5, eval_window=5)
        rep = E.run_experiment(cfg)
        assert rep.final_f1 == pytest.approx(np.mean([r.test_macro_f1 for r in rep.rounds]), abs=1e-12)
        cfg = small_config(rounds=5, eval_window=2)
        rep = E.run_experiment(cfg)
        assert rep.final_f1 == pytest.approx(np.mean([r.test_macro_f1 for r in rep.rounds[-2:]]), abs=1e-12)
        assert rep.best_f1 == rep.final_f1  # single network
        assert rep.best_accuracy == max(r.test_accuracy for r in rep.rounds)

    def test_record_invariants(self):
        rep = E.run_experiment(small_config())
        for r in rep.rounds:
            assert len(r.selected) == 3
            assert 0 <= r.test_macro_f1 <= 1 and 0 <= r.test_accuracy <= 1
            assert len(r.n_k) == 3

    def test_config_round_trip(self):
        cfg = small_config(noise=NoiseSpec("pairflip", 0.1, 0.3),
                           aggregator=AggregatorSpec("rfa", max_iters=7))
        rep = E.run_experiment(cfg)
        echo = json.loads(json.dumps(rep.to_dict()))["config"]
        assert E.ExperimentConfig.from_dict(echo) == cfg
        assert parse_config(config_to_text(cfg)) == cfg

    def test_broadcast_identity_and_isolation(self, monkeypatch):
        cfg = small_config()
        state = E.setup(cfg)
        seen = []
        real = E.local_train

        def spy(client, global_params, *args):
            seen.append((client.client_id, global_params))
            return real(client, global_params, *args)

        monkeypatch.setattr(E, "local_train", spy)
        before = {c.client_id: c.params for c in state.clients}
        snapshot = state.global_params
        _, record = E.run_round(state, cfg, 0)
        assert sorted(k for k, _ in seen) == record.selected
        assert all(g is snapshot for _, g in seen)
        for c in state.clients:
            if c.client_id not in record.selected:
                assert c.params is before[c.client_id]

    def test_aggregator_failure_has_round_context(self, monkeypatch):
        cfg = small_config()
        state = E.setup(cfg)

        def boom(*a, **k):
            raise ValueError("bad uploads")

        monkeypatch.setattr(E, "aggregate", boom)
        with pytest.raises(RuntimeError, match="round 2"):
            E.run_round(state, cfg, 2)

    def test_coteach_records_peer_and_clean_fraction(self):
        cfg = small_config(strategy=StrategySpec(kind="coteach", epochs=1, batch_size=32),
                           noise=NoiseSpec("symmetric", 0.3, 0.3))
        rep = E.run_experiment(cfg)
        for r in rep.rounds:
            assert 0 <= r.selection_clean_fraction <= 1
            assert r.peer_macro_f1 is not None
        assert rep.final_peer_f1 is not None
        assert rep.best_f1 == max(rep.final_f1, rep.final_peer_f1)

    def test_spectrum_records(self):
        rep = E.run_experiment(small_config(spectrum=True))
        assert all(r.spectrum is not None and r.spectrum.round == r.round for r in rep.rounds)
        assert len(rep.final_spectrum.singular_values) == 6

    def test_noise_rate_reported(self):
        rep = E.run_experiment(small_config(noise=NoiseSpec("symmetric", 0.5, 0.5)))
        assert 0.3 < rep.train_noise_rate < 0.7


class TestConfigValidation:
    def test_participants_bound(self):
        with pytest.raises(ValueError):
            small_config(participants=7)

    def test_window_bound(self):
        with pytest.raises(ValueError):
            small_config(rounds=1, eval_window=2)

    def test_aggregator_feasibility(self):
        with pytest.raises(ValueError, match="krum"):
            small_config(participants=2, aggregator=AggregatorSpec("krum"))


class TestRepeated:
    def test_seeds_and_summary(self):
        cfg = small_config(rounds=2, eval_window=1)
        summary = E.run_repeated(cfg, 3)
        assert [r.config.seed for r in summary.reports] == [1, 2, 3]
        vals = summary.final_f1s
        assert summary.mean == pytest.approx(np.mean(vals))
        assert summary.spread == pytest.approx(np.std(vals, ddof=1))

    def test_round_rows_format(self):
        rep = E.run_experiment(small_config(rounds=2, eval_window=1))
        rows = E.round_rows(rep.rounds)
        assert rows[0][:3] == ["round", "selected", "test_macro_f1"]
        assert rows[1][0] == "0"
        assert float(rows[1][2]) == rep.rounds[0].test_macro_f1
        assert rows[1][6] == ""  # no co-teaching


def test_replace_seed_keeps_everything_else():
    cfg = small_config()
    assert cfg.with_seed(9) == replace(cfg, seed=9)
