import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from neuraleq.neural_eq import MlpBaselineConfig, NeuralEqConfig, checkpoint_bytes, init_mlp, init_params
from neuraleq.signal_model import PAM2, PAM4, Channel, SymbolStream, sigma_for_snr
from neuraleq.trainer import (AdamState, BerPoint, TrainConfig, TrainingDiverged, adam_step,
                              ber_csv_row, ce_loss, eval_shard, evaluate_ber, sample_windows,
                              trace_csv, train, wilson_interval)

SMALL = NeuralEqConfig(T=6, D=2, N=4, mod_order=4)


def small_cfg(**kw):
    base = dict(batch_size=64, train_symbols=64 * 6, valid_symbols=256, test_symbols=64,
                snr_db=14.0, seed=3, valid_every=2)
    base.update(kw)
    return TrainConfig(**base)


class TestLoss:
    def test_certain(self):
        assert ce_loss([0, 1, 0, 0], 1) == 0.0

    def test_uniform(self):
        assert ce_loss([0.25] * 4, 2) == pytest.approx(math.log(4), abs=1e-12)

    def test_tenth(self):
        assert ce_loss([0.9, 0.1], 1) == pytest.approx(2.302585, abs=1e-6)

    def test_clamped(self):
        assert ce_loss([1.0, 0.0], 1) == pytest.approx(-math.log(1e-30))

    def test_label_range(self):
        with pytest.raises(ValueError):
            ce_loss([0.5, 0.5], 2)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.5, -2.0])}
        st_ = AdamState()
        adam_step(p, {"w": np.zeros(2)}, st_, 1e-3)
        np.testing.assert_array_equal(p["w"], [1.5, -2.0])
        assert st_.t == 1

    def test_first_step_magnitude(self):
        p = {"w": np.array(0.0)}
        adam_step(p, {"w": np.array(1.0)}, AdamState(), 1e-3)
        assert p["w"] == pytest.approx(-1e-3, rel=1e-6)

    def test_mask_respected(self):
        p = {"W1": np.array([0.0, 1.0])}
        mask = {"W1": np.array([False, True])}
        adam_step(p, {"W1": np.array([5.0, 1.0])}, AdamState(), 1e-2, mask, ("W1",))
        assert p["W1"][0] == 0.0

    def test_non_finite_names_tensor(self):
        with pytest.raises(FloatingPointError, match="Wg2"):
            adam_step({"Wg2": np.zeros(2)}, {"Wg2": np.array([1.0, np.nan])}, AdamState(), 1e-3)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), st.integers(1, 5))
    def test_constant_gradient_steps_are_lr(self, g, n):
        p = {"w": np.array(0.0)}
        s = AdamState()
        for _ in range(n):
            adam_step(p, {"w": np.array(g)}, s, 1e-3)
        assert p["w"] == pytest.approx(-math.copysign(n * 1e-3, g), rel=1e-4)


def numeric_grad(model, X, y, key, idx, h=1e-4):
    p = model.params[key]
    old = p[idx]
    p[idx] = old + h
    lp = model.loss_and_grads(X, y)[0]
    p[idx] = old - h
    lm = model.loss_and_grads(X, y)[0]
    p[idx] = old
    return (lp - lm) / (2 * h)


class TestGradients:
    @pytest.mark.parametrize("D", [1, 2, 4])
    def test_neuraleq_finite_differences(self, D, rng):
        m = init_params(NeuralEqConfig(T=4, D=D, N=3, mod_order=4), 5)
        for k in m.params:
            m.params[k] = rng.normal(scale=0.5, size=m.params[k].shape)
        X = rng.normal(size=(9, 4))
        y = rng.integers(0, 4, 9)
        _, grads = m.loss_and_grads(X, y)
        for k, g in grads.items():
            for idx in np.ndindex(g.shape):
                num = numeric_grad(m, X, y, k, idx)
                assert abs(g[idx] - num) <= 1e-4 * max(abs(num), 1e-3), (k, idx)

    def test_mlp_finite_differences(self, rng):
        m = init_mlp(MlpBaselineConfig(hidden=(3, 4), T=5, mod_order=2, D=2), 2)
        X = rng.normal(size=(7, 5))
        y = rng.integers(0, 2, 7)
        _, grads = m.loss_and_grads(X, y)
        for k, g in grads.items():
            for idx in np.ndindex(g.shape):
                num = numeric_grad(m, X, y, k, idx)
                assert abs(g[idx] - num) <= 1e-4 * max(abs(num), 1e-3), (k, idx)


class TestData:
    def test_labels_align(self, toy_channel):
        X, y = sample_windows(toy_channel, PAM4, 1e-12, 6, 2, 500, 1, ("t",))
        lv = PAM4.level_array
        # noiseless: decided sample = label plus ISI from the previous labels
        recon = lv[y[3:]] + 0.4 * lv[y[2:-1]] + 0.2 * lv[y[1:-2]] + 0.1 * lv[y[:-3]]
        np.testing.assert_allclose(X[3:, 1], recon, atol=1e-9)
        np.testing.assert_array_equal(X[1:, 0], X[:-1, 1])

    def test_streams_independent(self, toy_channel):
        a = sample_windows(toy_channel, PAM4, 0.1, 6, 2, 100, 1, ("train", 0))
        b = sample_windows(toy_channel, PAM4, 0.1, 6, 2, 100, 1, ("train", 1))
        c = sample_windows(toy_channel, PAM4, 0.1, 6, 2, 100, 1, ("train", 0))
        assert not np.array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[0], c[0])


class TestTrain:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=100, valid_symbols=50)

    def test_one_batch_budget(self, toy_channel):
        cfg = small_cfg(train_symbols=64)
        r = train(init_params(SMALL, 0), cfg, toy_channel, PAM4)
        assert r.steps == 1
        assert len(r.trace) == 1 and r.trace[0][2] is not None

    def test_deterministic(self, toy_channel):
        a = train(init_params(SMALL, 0), small_cfg(), toy_channel, PAM4)
        b = train(init_params(SMALL, 0), small_cfg(), toy_channel, PAM4)
        assert checkpoint_bytes(a.params) == checkpoint_bytes(b.params)
        assert trace_csv(a.trace) == trace_csv(b.trace)

    def test_resume_is_exact(self, toy_channel, tmp_path):
        full = train(init_params(SMALL, 0), small_cfg(), toy_channel, PAM4)
        state = tmp_path / "state.npz"
        part = train(init_params(SMALL, 0), small_cfg(), toy_channel, PAM4,
                     state_path=state, stop_after=4)
        assert part.steps == 4
        rest = train(init_params(SMALL, 0), small_cfg(), toy_channel, PAM4,
                     state_path=state, resume=True)
        assert checkpoint_bytes(rest.params) == checkpoint_bytes(full.params)
        assert trace_csv(rest.trace) == trace_csv(full.trace)

    def test_best_of_validation(self, toy_channel):
        r = train(init_params(SMALL, 0), small_cfg(), toy_channel, PAM4)
        vals = [v for _, _, v in r.trace if v is not None]
        assert r.valid_ber == min(vals)

    def test_loss_decreases_early(self, toy_channel):
        cfg = small_cfg(batch_size=256, train_symbols=256 * 60, test_symbols=256, valid_every=60)
        r = train(init_params(SMALL, 0), cfg, toy_channel, PAM4)
        loss = np.array([l for _, l, _ in r.trace])
        assert np.all(np.isfinite(loss))
        assert loss[-10:].mean() < loss[:10].mean()

    def test_divergence_reported(self, toy_channel):
        m = init_params(SMALL, 0)
        m.params["Wg2"][...] = np.nan
        with pytest.raises(TrainingDiverged) as exc:
            train(m, small_cfg(), toy_channel, PAM4)
        assert exc.value.last_good is not None

    def test_trace_csv(self):
        text = trace_csv([(1, 0.5, None), (2, 0.25, 0.125)])
        assert text == "step,loss,valid_ber\n1,0.5,\n2,0.25,0.125\n"


def slicer(mod):
    return lambda obs: SymbolStream(mod.slice(obs.samples))


class TestEvaluate:
    def test_perfect_decisions(self, toy_channel):
        ch = Channel((1.0,))
        p = evaluate_ber(slicer(PAM2), ch, PAM2, 60.0, 5000, 1)
        assert p.bit_errors == 0 and p.ber == 0.0

    def test_gaussian_tail(self):
        ch = Channel((1.0,))
        snr = 10 * math.log10(PAM2.mean_power / 0.25)
        assert sigma_for_snr(ch, PAM2, snr) == pytest.approx(0.5)
        p = evaluate_ber(slicer(PAM2), ch, PAM2, snr, 400_000, 7)
        q2 = norm.sf(2.0)
        assert q2 == pytest.approx(0.02275, abs=1e-5)
        assert p.ci_low <= q2 <= p.ci_high

    def test_minimum_budget(self, toy_channel):
        with pytest.raises(ValueError):
            evaluate_ber(slicer(PAM4), toy_channel, PAM4, 10.0, 999, 1)

    def test_shard_additivity(self, toy_channel):
        eq = slicer(PAM4)
        sigma = sigma_for_snr(toy_channel, PAM4, 12.0)
        whole = evaluate_ber(eq, toy_channel, PAM4, 12.0, 10_000, 4, shard_size=4000)
        parts = [eval_shard(eq, toy_channel, PAM4, sigma, n, 4, i)
                 for i, n in enumerate((4000, 4000, 2000))]
        assert whole.bit_errors == sum(e for e, _ in parts)
        assert whole.total_bits == sum(b for _, b in parts) == 20_000

    def test_deterministic(self, toy_channel):
        a = evaluate_ber(slicer(PAM4), toy_channel, PAM4, 12.0, 5000, 9)
        b = evaluate_ber(slicer(PAM4), toy_channel, PAM4, 12.0, 5000, 9)
        assert ber_csv_row(a) == ber_csv_row(b)

    def test_invalid_symbols_excluded(self, toy_channel):
        def eq(obs):
            n = len(obs.samples)
            valid = np.ones(n, dtype=bool)
            valid[:100] = False
            return np.zeros(n, dtype=int), valid
        p = evaluate_ber(eq, toy_channel, PAM4, 20.0, 5000, 1)
        assert p.total_bits == 2 * (5000 - 100 + len(toy_channel))


class TestWilson:
    def test_zero_errors(self):
        lo, hi = wilson_interval(0, 1000)
        assert lo == 0.0 and 0 < hi < 0.004

    def test_known_value(self):
        # closed form for k=50, n=1000
        lo, hi = wilson_interval(50, 1000)
        assert lo == pytest.approx(0.038135, abs=1e-5)
        assert hi == pytest.approx(0.065321, abs=1e-5)

    @settings(max_examples=50)
    @given(st.integers(1, 10 ** 6), st.data())
    def test_contains_estimate(self, n, data):
        k = data.draw(st.integers(0, n))
        lo, hi = wilson_interval(k, n)
        assert 0 <= lo <= k / n <= hi <= 1

    def test_csv_row(self):
        p = BerPoint(17.0, "ffe", 3, 1000, 5, 0.001, 0.008)
        assert ber_csv_row(p) == "17.0,ffe,3,1000,0.003,0.001,0.008,5"
