import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuraleq.linear_eq import (DfeConfig, FfeTaps, combined_pulse, default_cursor, design_ffe_dfe,
                                design_mmse_ffe, dfe_run, ffe_apply, load_dfe, load_ffe, save_dfe,
                                save_ffe)
from neuraleq.signal_model import (PAM2, PAM4, Channel, add_awgn, apply_channel, random_symbols,
                                   sigma_for_snr)


def off_cursor_energy(g, cursor):
    return float(np.sum(np.square(g)) - g[cursor] ** 2)


class TestDesign:
    def test_identity_noiseless(self):
        assert design_mmse_ffe(Channel((1.0,)), PAM2, 0.0, 1, 0).taps == (1.0,)

    @pytest.mark.parametrize("sigma", [0.1, 0.5, 1.0])
    def test_identity_shrinkage(self, sigma):
        # scalar Wiener gain Es / (Es + sigma^2)
        w = design_mmse_ffe(Channel((1.0,)), PAM4, sigma, 1, 0).taps[0]
        es = PAM4.mean_power
        assert w == pytest.approx(es / (es + sigma ** 2), rel=1e-12)

    def test_zero_forcing_limit(self):
        ch = Channel((1.0, 0.5))
        ff = design_mmse_ffe(ch, PAM2, 0.0, 8, 0)
        g = combined_pulse(ff, ch)
        assert g[0] == pytest.approx(1.0, abs=1e-3)
        assert off_cursor_energy(g, 0) <= 1e-3
        # truncated geometric-series inverse
        np.testing.assert_allclose(ff.taps, (-0.5) ** np.arange(8), atol=1e-2)

    def test_reduces_isi_at_11db(self, toy_channel):
        sigma = sigma_for_snr(toy_channel, PAM4, 11.0)
        ff = design_mmse_ffe(toy_channel, PAM4, sigma, 8, unbiased=True)
        g = combined_pulse(ff, toy_channel)
        assert off_cursor_energy(g, ff.cursor) < off_cursor_energy(np.array(toy_channel.taps), 0)

    def test_default_cursor(self, toy_channel):
        assert default_cursor(toy_channel, 8) == 2
        assert default_cursor(Channel((0.2, 1.0, 0.3), 1), 8) == 3
        assert default_cursor(toy_channel, 2) == 1

    def test_unbiased_unit_cursor(self, toy_channel):
        ff = design_mmse_ffe(toy_channel, PAM4, 0.3, 8, unbiased=True)
        assert combined_pulse(ff, toy_channel)[ff.cursor] == pytest.approx(1.0, abs=1e-12)

    def test_bad_arguments(self, toy_channel):
        with pytest.raises(ValueError):
            design_mmse_ffe(toy_channel, PAM4, 0.1, 0)
        with pytest.raises(ValueError):
            design_mmse_ffe(toy_channel, PAM4, 0.1, 4, cursor=4)
        with pytest.raises(ValueError):
            design_mmse_ffe(toy_channel, PAM4, -0.1, 4)
        with pytest.raises(ValueError):
            design_ffe_dfe(toy_channel, PAM4, 0.1, 4, -1)

    def test_singular_falls_back(self):
        # feedback swallows every column but the cursor, so R is rank one
        ch = Channel((1.0, 0.5))
        with pytest.warns(UserWarning, match="singular"):
            cfg = design_ffe_dfe(ch, PAM2, 0.0, 2, 2, cursor=0)
        assert np.all(np.isfinite(cfg.ff.taps))

    def test_no_feedback_matches_ffe(self, toy_channel):
        cfg = design_ffe_dfe(toy_channel, PAM4, 0.2, 8, 0)
        assert cfg.fb == ()
        assert cfg.ff == design_mmse_ffe(toy_channel, PAM4, 0.2, 8)

    def test_feedback_taps_are_residual_postcursors(self, toy_channel):
        cfg = design_ffe_dfe(toy_channel, PAM4, 0.2, 8, 3)
        g = combined_pulse(cfg.ff, toy_channel)
        c = cfg.ff.cursor
        np.testing.assert_allclose(cfg.fb, g[c + 1: c + 4], atol=1e-15)

    def test_large_config_accepted(self, toy_channel):
        cfg = design_ffe_dfe(toy_channel, PAM4, 0.1, 24, 5)
        assert len(cfg.ff.taps) == 24 and len(cfg.fb) == 5


class TestApply:
    def test_identity(self, rng):
        x = rng.normal(size=50)
        np.testing.assert_array_equal(ffe_apply(FfeTaps((1.0,), 0), x), x)

    def test_pure_delay_is_compensated(self, rng):
        x = rng.normal(size=50)
        np.testing.assert_array_equal(ffe_apply(FfeTaps((0.0, 1.0), 1), x), x)

    def test_noise_variance_scaling(self):
        taps = FfeTaps((0.5, -0.3, 0.2, 0.1), 1)
        noise = add_awgn(np.zeros(400_000), 1.0, 8).samples
        var = np.var(ffe_apply(taps, noise)[:-4])
        assert var == pytest.approx(sum(t * t for t in taps.taps), rel=0.02)

    def test_output_on_pulse_matches_combined(self, toy_channel):
        ff = design_mmse_ffe(toy_channel, PAM4, 0.1, 8, cursor=0)
        pulse = np.zeros(20)
        pulse[: len(toy_channel)] = toy_channel.taps
        g = combined_pulse(ff, toy_channel)
        np.testing.assert_allclose(ffe_apply(ff, pulse)[: len(g)], g, atol=1e-12)


class TestDfe:
    def test_zero_feedback_is_sliced_ffe(self, toy_channel, rng):
        ff = design_mmse_ffe(toy_channel, PAM4, 0.2, 8)
        x = rng.normal(size=300)
        a = dfe_run(DfeConfig(ff, (0.0, 0.0)), x, PAM4).indices
        np.testing.assert_array_equal(a, PAM4.slice(ffe_apply(ff, x)))

    def test_exact_postcursor_cancellation(self):
        ch = Channel((1.0, 0.5))
        z = random_symbols(10_000, PAM2, 2)
        d = dfe_run(DfeConfig(FfeTaps((1.0,), 0), (0.5,)), apply_channel(z, PAM2, ch), PAM2)
        np.testing.assert_array_equal(d.indices, z.indices)

    def test_error_burst_then_recovery(self):
        ch = Channel((1.0, 0.9))
        z = random_symbols(200, PAM2, 3)
        x = apply_channel(z, PAM2, ch)
        cfg = DfeConfig(FfeTaps((1.0,), 0), (0.9,))
        flipped = 1 - z.indices[50]
        d = dfe_run(cfg, x, PAM2, force={50: flipped}).indices
        wrong = np.flatnonzero(d != z.indices)
        assert wrong[0] == 50
        assert wrong[-1] < 150  # burst is finite
        np.testing.assert_array_equal(d[wrong[-1] + 1:], z.indices[wrong[-1] + 1:])

    def test_noiseless_8_3(self, toy_channel):
        cfg = design_ffe_dfe(toy_channel, PAM4, 0.0, 8, 3)
        z = random_symbols(100_000, PAM4, 4)
        d = dfe_run(cfg, apply_channel(z, PAM4, toy_channel), PAM4).indices
        # the last cursor symbols lack future samples
        np.testing.assert_array_equal(d[:-8], z.indices[:-8])

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.floats(0.05, 0.6), min_size=1, max_size=4), st.integers(0, 2 ** 31))
    def test_zero_errors_without_precursor(self, post, seed):
        ch = Channel((1.0, *post))
        cfg = DfeConfig(FfeTaps((1.0,), 0), tuple(post))
        z = random_symbols(2000, PAM4, seed)
        np.testing.assert_array_equal(dfe_run(cfg, apply_channel(z, PAM4, ch), PAM4).indices,
                                      z.indices)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 3))
    def test_slicer_idempotent(self, k):
        x = np.full(5, PAM4.levels[k])
        assert dfe_run(DfeConfig(FfeTaps((1.0,), 0), (0.1,)), x, PAM4).indices[0] == k
        assert PAM4.slice(x).tolist() == [k] * 5


class TestFiles:
    def test_ffe_round_trip(self, tmp_path):
        ff = FfeTaps((0.1, 1 / 3, -2.5e-7), 1)
        save_ffe(ff, tmp_path / "f.txt")
        assert load_ffe(tmp_path / "f.txt") == ff

    def test_dfe_round_trip(self, tmp_path, toy_channel):
        cfg = design_ffe_dfe(toy_channel, PAM4, 0.1, 8, 3)
        save_dfe(cfg, tmp_path / "d.txt")
        assert load_dfe(tmp_path / "d.txt") == cfg
