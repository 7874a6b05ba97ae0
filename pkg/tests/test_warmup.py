"""Warmup schedule, loss, and the update loop's masking guarantees."""

import numpy as np
import pytest

from rnnwarmup import autodiff as ad
from rnnwarmup import vaa, warmup

from helpers import params_equal, parameter_fingerprint, random_sequences, small_network


class TestSchedule:
    @pytest.mark.parametrize("step,expected", [(1, 11), (3, 31), (1000, 200)])
    def test_cap_formula(self, step, expected):
        assert warmup.max_stabilization_period(step, 200, 10) == expected

    def test_step_must_start_at_one(self):
        with pytest.raises(ValueError):
            warmup.max_stabilization_period(0, 200, 10)


class TestLoss:
    def test_exact_target_gives_zero(self):
        k = 0.95
        vals = [ad.Tensor(k), ad.Tensor(k)]
        assert warmup.warmup_loss(vals, k).item() == 0.0

    def test_single_layer_value(self):
        loss = warmup.warmup_loss([ad.Tensor(0.5)], 0.95)
        assert loss.item() == pytest.approx(0.2025)

    def test_two_layer_mean(self):
        loss = warmup.warmup_loss([ad.Tensor(1.0), ad.Tensor(0.9)], 0.95)
        assert loss.item() == pytest.approx(0.0025)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            warmup.warmup_loss([], 0.95)


class TestLoop:
    def _dataset(self, seed=0, count=12, length=8, dim=2):
        return random_sequences(np.random.default_rng(seed), count, length, dim)

    def test_zero_steps_leaves_params_untouched(self):
        net = small_network(seed=0, widths=(4, 3))
        before = parameter_fingerprint(net.parameters())
        trace = warmup.warmup(
            self._dataset(), net, warmup.WarmupConfig(steps=0, batch_size=4), np.random.default_rng(0)
        )
        assert trace == []
        assert params_equal(before, net.parameters())

    def test_batch_larger_than_dataset_rejected(self):
        net = small_network(seed=1)
        with pytest.raises(ValueError):
            warmup.warmup(
                self._dataset(count=3), net,
                warmup.WarmupConfig(steps=1, batch_size=5), np.random.default_rng(0),
            )

    def test_trace_schema_and_determinism(self):
        cfg = warmup.WarmupConfig(steps=5, batch_size=6, max_stabilization=20,
                                  stabilization_increment=3)
        net1 = small_network(seed=2, widths=(4, 3))
        t1 = warmup.warmup(self._dataset(1), net1, cfg, np.random.default_rng(1))
        net2 = small_network(seed=2, widths=(4, 3))
        t2 = warmup.warmup(self._dataset(1), net2, cfg, np.random.default_rng(1))
        assert t1 == t2
        assert [r.step for r in t1] == [1, 2, 3, 4, 5]
        for r in t1:
            assert 1 <= r.sampled_m <= warmup.max_stabilization_period(r.step, 20, 3)
            assert len(r.layer_values) == 2
            assert r.loss >= 0.0
        for a, b in zip(net1.parameters(), net2.parameters()):
            assert np.array_equal(a.data, b.data)

    def test_head_and_frozen_half_bit_identical(self):
        net = small_network(seed=3, widths=(6, 6), fractions=[0.5, 0.5])
        warmed, frozen = net.warmed_partition()
        frozen_before = parameter_fingerprint(frozen)
        head_before = parameter_fingerprint([net.head_w, net.head_b])
        warmed_before = parameter_fingerprint(warmed)
        warmup.warmup(
            self._dataset(2), net,
            warmup.WarmupConfig(steps=4, batch_size=6, learning_rate=0.05),
            np.random.default_rng(2),
        )
        assert params_equal(frozen_before, frozen)
        assert params_equal(head_before, [net.head_w, net.head_b])
        assert not params_equal(warmed_before, warmed)

    def test_sgd_rule_is_exactly_lr_times_gradient(self):
        # one step in sgd mode: the update must be exactly lr * dL/dtheta
        net = small_network(seed=4, widths=(4,))
        data = self._dataset(3, count=5, length=6)
        cfg = warmup.WarmupConfig(steps=1, batch_size=5, learning_rate=0.123,
                                  max_stabilization=5, update_rule="sgd")
        params = net.layer_parameters()
        before = parameter_fingerprint(params)

        # replay the same single step by hand with an identical generator
        rng = np.random.default_rng(7)
        idx = rng.choice(5, size=5, replace=False)
        states = vaa.random_hidden_states(net, [data[i] for i in idx], rng)
        m_max = warmup.max_stabilization_period(1, 5, 10)
        sampled_m = int(rng.integers(1, m_max + 1))
        u = rng.standard_normal(2)
        score = vaa.vaa_star(
            vaa.LayerDynamics(net, 0, half=0), states.half_states[0][0], u,
            vaa.VaaConfig(sampled_m),
        )
        loss = warmup.warmup_loss([score], cfg.target)
        ad.zero_grads(params)
        ad.backward(loss, params=params)
        expected = [b - 0.123 * p.grad for b, p in zip(before, params)]
        for b, p in zip(before, params):  # restore, then run the real loop
            p.data = b.copy()
        ad.zero_grads(params)
        warmup.warmup(data, net, cfg, np.random.default_rng(7))
        for e, p in zip(expected, params):
            np.testing.assert_allclose(p.data, e, atol=1e-15)

    def test_unknown_update_rule_rejected(self):
        with pytest.raises(ValueError):
            warmup.WarmupConfig(update_rule="momentum")

    def test_stationary_at_exact_target(self):
        # rig the target to the score the first step will produce: the
        # squared gap is exactly zero, so SGD must not move any parameter
        net = small_network(seed=5, widths=(4,))
        data = self._dataset(4, count=6, length=5)
        rng = np.random.default_rng(11)
        idx = rng.choice(6, size=6, replace=False)
        states = vaa.random_hidden_states(net, [data[i] for i in idx], rng)
        m = int(rng.integers(1, warmup.max_stabilization_period(1, 200, 10) + 1))
        u = rng.standard_normal(2)
        with ad.no_grad():
            score = vaa.vaa_star(
                vaa.LayerDynamics(net, 0, half=0), states.half_states[0][0], u,
                vaa.VaaConfig(m),
            )
        k = float(score.data)
        before = parameter_fingerprint(net.parameters())
        warmup.warmup(
            data, net,
            warmup.WarmupConfig(steps=1, batch_size=6, target=k),
            np.random.default_rng(11),
        )
        assert params_equal(before, net.parameters())

    def test_batch_sampling_without_replacement(self):
        # batch size == dataset size forces every sequence exactly once
        net = small_network(seed=6, widths=(3,))
        data = self._dataset(5, count=7, length=4)
        seen = {}
        orig = vaa.random_hidden_states

        def spy(network, seqs, rng, window=None):
            out = orig(network, seqs, rng, window=window)
            seen["count"] = len(seqs)
            seen["unique"] = len({arr.tobytes() for arr in seqs})
            return out

        vaa_rhs = warmup.random_hidden_states
        try:
            warmup.random_hidden_states = spy
            warmup.warmup(
                data, net, warmup.WarmupConfig(steps=1, batch_size=7),
                np.random.default_rng(3),
            )
        finally:
            warmup.random_hidden_states = vaa_rhs
        assert seen == {"count": 7, "unique": 7}

    def test_increment_cap_mode_raises_sampling_ceiling(self):
        cfg = warmup.WarmupConfig(steps=30, batch_size=4, max_stabilization=2,
                                  stabilization_increment=1, increment_cap=True)
        net = small_network(seed=7, widths=(3,))
        trace = warmup.warmup(self._dataset(6, count=4, length=4), net, cfg,
                              np.random.default_rng(4))
        # the fixed cap would limit M to 2; the growing cap must exceed it
        assert max(r.sampled_m for r in trace) > 2

    def test_score_trend_improves_on_copy_style_data(self):
        net = small_network(seed=8, widths=(8,), input_dim=1)
        data = random_sequences(np.random.default_rng(9), 30, 12, 1)
        cfg = warmup.WarmupConfig(steps=40, batch_size=20, max_stabilization=30)
        trace = warmup.warmup(data, net, cfg, np.random.default_rng(5))
        first = np.mean([r.layer_values[0] for r in trace[:10]])
        last = np.mean([r.layer_values[0] for r in trace[-10:]])
        assert last > first
