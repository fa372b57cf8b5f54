import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaimager.errors import CalibrationError
from metaimager.noise import (
    NoiseKind,
    NoiseSpec,
    apply_noise,
    apply_noise_array,
    calibrate_rho_unit,
    estimate_noise_level,
    noise_from_draws,
)


class TestSpec:
    def test_aliases(self):
        assert NoiseKind.parse("rho") is NoiseKind.SIGNAL_INDEPENDENT
        assert NoiseKind.parse("Signal-Dependent") is NoiseKind.SIGNAL_DEPENDENT
        assert NoiseKind.parse("none") is NoiseKind.NONE
        with pytest.raises(ValueError):
            NoiseKind.parse("pink")

    def test_validation(self):
        with pytest.raises(ValueError):
            NoiseSpec(NoiseKind.SIGNAL_INDEPENDENT, 1.0, 0.0)
        with pytest.raises(ValueError):
            NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, -1.0)
        with pytest.raises(ValueError):
            NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, float("nan"))

    def test_dict_round_trip(self):
        spec = NoiseSpec(NoiseKind.SIGNAL_INDEPENDENT, 0.3, 2.5e-7)
        assert NoiseSpec.from_dict(spec.to_dict()) == spec
        assert spec.with_level(3.0).component_std == pytest.approx(7.5e-7)


class TestInjection:
    def test_none_is_identity(self):
        m = np.array([1 + 2j, -3j])
        out = apply_noise_array(m, NoiseSpec(), np.random.default_rng(0))
        np.testing.assert_array_equal(out, m)
        assert out is not m

    def test_zero_level_is_identity(self):
        m = np.array([1 + 2j])
        out = apply_noise_array(m, NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, 0.0), np.random.default_rng(0))
        np.testing.assert_array_equal(out, m)

    def test_signal_independent_std(self):
        spec = NoiseSpec(NoiseKind.SIGNAL_INDEPENDENT, 2.0, 0.5)
        m = np.full(100_000, 3 - 4j)
        n = apply_noise_array(m, spec, np.random.default_rng(1)) - m
        assert np.std(n.real) == pytest.approx(1.0, rel=0.01)
        assert np.std(n.imag) == pytest.approx(1.0, rel=0.01)
        assert abs(np.mean(n)) < 0.02

    def test_signal_dependent_std_law(self):
        beta = 0.7
        spec = NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, beta)
        m = np.full(100_000, -2.0 + 0.5j)
        n = apply_noise_array(m, spec, np.random.default_rng(2)) - m
        assert np.std(n.real) == pytest.approx(beta * 2.0, rel=0.01)
        assert np.std(n.imag) == pytest.approx(beta * 0.5, rel=0.01)

    def test_signal_dependent_vanishes_on_zero_component(self):
        spec = NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, 5.0)
        out = apply_noise_array(np.full(10, 2.0 + 0j), spec, np.random.default_rng(3))
        np.testing.assert_array_equal(out.imag, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0, 10), st.floats(-3, 3), st.floats(-3, 3))
    def test_draw_scaling_is_exact(self, re, im, beta, u, v):
        spec = NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, beta)
        n = noise_from_draws(np.array([re + 1j * im]), spec, np.array([u]), np.array([v]))
        assert n[0].real == pytest.approx(beta * abs(re) * u, rel=1e-14, abs=0)
        assert n[0].imag == pytest.approx(beta * abs(im) * v, rel=1e-14, abs=0)

    def test_scalar_wrapper(self):
        rec = apply_noise(1 + 1j, NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, 0.1), np.random.default_rng(0))
        assert rec.clean == 1 + 1j and rec.noisy != rec.clean

    def test_seed_reproducible(self):
        spec = NoiseSpec(NoiseKind.SIGNAL_INDEPENDENT, 1.0, 1.0)
        a = apply_noise_array(np.zeros(5, complex), spec, np.random.default_rng(9))
        b = apply_noise_array(np.zeros(5, complex), spec, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


def _toy_forward(n_atoms, n_pix, seed=0):
    rng = np.random.default_rng(seed)
    wt = rng.normal(size=(n_atoms, n_pix)) + 1j * rng.normal(size=(n_atoms, n_pix))
    wr = rng.normal(size=(n_atoms, n_pix)) + 1j * rng.normal(size=(n_atoms, n_pix))

    def single(ct, cr, scene):
        return complex(np.sum((ct @ wt) * (cr @ wr) * scene))

    def batched(ct, cr, scenes):
        return np.sum((ct @ wt) * (cr @ wr) * scenes, axis=1)

    batched.batched = True
    return single, batched


class TestCalibration:
    def test_matches_direct_std(self):
        single, _ = _toy_forward(4, 9)
        scenes = np.random.default_rng(1).uniform(0, 1, (5, 9))
        cal = calibrate_rho_unit(single, scenes, n_draws=500, rng_seed=3, n_atoms=4)
        rng = np.random.default_rng(3)
        tx = rng.integers(0, 2, size=(500, 4)).astype(float)
        rx = rng.integers(0, 2, size=(500, 4)).astype(float)
        idx = rng.integers(0, 5, size=500)
        m = np.array([single(tx[k], rx[k], scenes[idx[k]]) for k in range(500)])
        assert cal == pytest.approx(np.sqrt((np.var(m.real) + np.var(m.imag)) / 2), rel=1e-12)

    def test_batched_equals_single(self):
        single, batched = _toy_forward(4, 9)
        scenes = np.random.default_rng(1).uniform(0, 1, (5, 9))
        a = calibrate_rho_unit(single, scenes, 300, 7, 4)
        b = calibrate_rho_unit(batched, scenes, 300, 7, 4)
        assert a == pytest.approx(b, rel=1e-12)

    def test_zero_signal(self):
        with pytest.raises(CalibrationError):
            calibrate_rho_unit(lambda ct, cr, s: 0j, [np.zeros(3)], 200, 0, 4)

    def test_too_few_draws(self):
        with pytest.raises(ValueError):
            calibrate_rho_unit(lambda ct, cr, s: 1j, [np.zeros(3)], 10, 0, 4)

    def test_unit_snr_at_rho_one(self):
        single, batched = _toy_forward(6, 16, seed=4)
        scenes = np.random.default_rng(5).uniform(0, 1, (20, 16))
        cal = calibrate_rho_unit(batched, scenes, 4000, 0, 6)
        rng = np.random.default_rng(11)
        ct = rng.integers(0, 2, (4000, 6)).astype(float)
        cr = rng.integers(0, 2, (4000, 6)).astype(float)
        m = batched(ct, cr, scenes[rng.integers(0, 20, 4000)])
        spec = NoiseSpec(NoiseKind.SIGNAL_INDEPENDENT, 1.0, cal)
        n = apply_noise_array(m, spec, rng) - m
        snr_db = 10 * np.log10((np.var(m.real) + np.var(m.imag)) / (np.var(n.real) + np.var(n.imag)))
        assert abs(snr_db) < 0.5


class TestEstimator:
    @pytest.mark.parametrize("rho", [0.1, 1.0, 10.0])
    def test_recovers_signal_independent(self, rho):
        cal = 3e-7
        spec = NoiseSpec(NoiseKind.SIGNAL_INDEPENDENT, rho, cal)
        reps = apply_noise_array(np.full(10_000, 1e-6 + 2e-6j), spec, np.random.default_rng(0))
        assert estimate_noise_level(reps, "signal_independent", cal) == pytest.approx(rho, rel=0.05)

    @pytest.mark.parametrize("beta", [0.01, 0.3, 1.0])
    def test_recovers_signal_dependent(self, beta):
        spec = NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, beta)
        reps = apply_noise_array(np.full(10_000, 2.0 - 1.0j), spec, np.random.default_rng(1))
        assert estimate_noise_level(reps, "signal_dependent") == pytest.approx(beta, rel=0.05)

    def test_skips_zero_mean_component(self):
        spec = NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, 0.2)
        reps = apply_noise_array(np.full(10_000, 5.0 + 0j), spec, np.random.default_rng(2))
        assert estimate_noise_level(reps, "signal_dependent") == pytest.approx(0.2, rel=0.05)

    def test_errors(self):
        with pytest.raises(CalibrationError):
            estimate_noise_level([1 + 1j], "signal_dependent")
        with pytest.raises(CalibrationError):
            estimate_noise_level([0j, 0j], "signal_dependent")
        with pytest.raises(CalibrationError):
            estimate_noise_level([1j, 2j], "signal_independent", 0.0)

    def test_noise_free_repeats(self):
        assert estimate_noise_level([1 + 1j] * 4, "signal_dependent") == 0.0
