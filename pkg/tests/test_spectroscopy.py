"""Line-shape, oracle, and surrogate tests.

The Voigt reference values are frozen from an independent quadrature of the
Gaussian-Lorentzian convolution integral (adaptive quad over a +-14 sigma
window, rel err < 1e-13); the quadrature itself is kept here so the frozen
numbers can be regenerated.
"""

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import erfcx

from ptvlidar.constants import C_LIGHT, KB, M_AIR, N_AVOGADRO, F_O2
from ptvlidar.grids import make_grid
from ptvlidar.spectroscopy import (LineRecord, P_REF, SpectroModel,
                                   SurrogateTrainingError, T_REF,
                                   evaluate, evaluate_with_partials,
                                   oracle_absorption,
                                   oracle_rayleigh_brillouin,
                                   train_surrogate, voigt_profile)

O2_MASS = 5.3134e-26


def quad_voigt(nu: float, sigma: float, gamma: float) -> float:
    g = lambda t: np.exp(-0.5 * (t / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
    l = lambda t: gamma / np.pi / (t * t + gamma * gamma)
    lo, hi = -14.0 * sigma, 14.0 * sigma
    pts = [p for p in (0.0, nu) if lo < p < hi]
    val, _ = quad(lambda t: g(t) * l(nu - t), lo, hi, points=pts,
                  limit=400, epsabs=1e-22, epsrel=1e-13)
    return val


# (nu, sigma_g, gamma_l) -> quadrature value, frozen
VOIGT_REFERENCE = {
    (0.0, 0.35e9, 0.22e9): 7.35545674990781253e-10,
    (0.7e9, 0.35e9, 0.22e9): 2.45419679501905530e-10,
    (2.0e9, 0.5e9, 0.1e9): 1.05266475067444914e-11,
    (-1.3e9, 0.2e9, 0.4e9): 7.31331886354040371e-11,
}


class TestVoigtProfile:
    def test_matches_frozen_quadrature(self):
        for (nu, s, g), ref in VOIGT_REFERENCE.items():
            got = float(voigt_profile(np.array([nu]), s, g)[0])
            assert got == pytest.approx(ref, rel=1e-12)

    def test_quadrature_oracle_reproduces_frozen_values(self):
        # guards the frozen table itself against transcription errors
        for (nu, s, g), ref in VOIGT_REFERENCE.items():
            assert quad_voigt(nu, s, g) == pytest.approx(ref, rel=1e-10)

    def test_center_value_closed_form(self):
        # V(0) = erfcx(gamma/(sigma sqrt 2)) / (sigma sqrt(2 pi))
        for s, g in [(0.3e9, 0.1e9), (0.5e9, 0.5e9), (1.0e9, 0.05e9)]:
            expect = erfcx(g / (s * np.sqrt(2))) / (s * np.sqrt(2 * np.pi))
            got = float(voigt_profile(np.zeros(1), s, g)[0])
            assert got == pytest.approx(expect, rel=1e-13)

    def test_gaussian_limit(self):
        nu = np.linspace(-2e9, 2e9, 41)
        s = 0.4e9
        expect = np.exp(-0.5 * (nu / s) ** 2) / (s * np.sqrt(2 * np.pi))
        got = voigt_profile(nu, s, 0.0)
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_lorentzian_branch(self):
        nu = np.linspace(-2e9, 2e9, 41)
        g = 0.3e9
        expect = g / np.pi / (nu**2 + g**2)
        got = voigt_profile(nu, 0.0, g)
        np.testing.assert_allclose(got, expect, rtol=1e-14)

    def test_unit_area(self):
        s, g = 0.35e9, 0.22e9
        area, _ = quad(lambda t: float(voigt_profile(np.array([t]), s, g)[0]),
                       -60e9, 60e9, limit=800)
        # Lorentzian tails beyond the window hold ~2*gamma/(pi*60e9) of mass
        assert area == pytest.approx(1.0, abs=5e-3)
        assert area < 1.0

    def test_even_in_frequency(self):
        nu = np.linspace(0.1e9, 3e9, 7)
        a = voigt_profile(nu, 0.3e9, 0.2e9)
        b = voigt_profile(-nu, 0.3e9, 0.2e9)
        np.testing.assert_allclose(a, b, rtol=1e-14)


def _wide_grid(n_freq=401, span=40e9):
    # single-cell grid with a comb wide enough to hold a whole line
    return make_grid(1, 1, 37.5, n_freq, span, raw_bin_s=2.0, bin_s=2.0)


class TestAbsorptionOracle:
    LINE = LineRecord(0.0, 1.0e-19, 0.30e9, 0.70, 1500.0 * KB, O2_MASS)

    def test_area_equals_scaled_strength(self):
        grid = _wide_grid()
        dnu = grid.freq_offsets[1] - grid.freq_offsets[0]
        for T in (220.0, 296.0, 320.0):
            xs = oracle_absorption([self.LINE], T, 90000.0, grid)
            strength = self.LINE.strength_ref * np.exp(
                (self.LINE.lower_state_energy / KB) * (1 / T_REF - 1 / T))
            assert xs.sum() * dnu == pytest.approx(strength, rel=2e-2)

    def test_boltzmann_temperature_scaling(self):
        # peak ratio between two temperatures isolates the strength factor
        # once the width change is divided out via a zero-width line
        grid = _wide_grid()
        narrow = LineRecord(0.0, 1.0e-19, 0.0, 0.70, 1500.0 * KB, O2_MASS)
        xs1 = oracle_absorption([narrow], 240.0, 90000.0, grid)
        xs2 = oracle_absorption([narrow], 300.0, 90000.0, grid)
        dnu = grid.freq_offsets[1] - grid.freq_offsets[0]
        ratio = (xs2.sum() * dnu) / (xs1.sum() * dnu)
        expect = np.exp(1500.0 * (1 / 240.0 - 1 / 300.0))
        assert ratio == pytest.approx(expect, rel=1e-6)

    def test_pressure_scales_lorentz_width(self):
        # half pressure halves gamma_L: with sigma_d ~ 0 the profile center
        # value doubles
        grid = make_grid(1, 1, 37.5, 3, 1e6, raw_bin_s=2.0, bin_s=2.0)
        heavy = LineRecord(0.0, 1.0e-19, 0.30e9, 0.0, 0.0, 1e-20)
        c = grid.center_index
        full = oracle_absorption([heavy], 296.0, P_REF, grid)[c]
        half = oracle_absorption([heavy], 296.0, P_REF / 2, grid)[c]
        assert half == pytest.approx(2.0 * full, rel=1e-6)

    def test_temperature_exponent_scales_width(self):
        grid = make_grid(1, 1, 37.5, 3, 1e6, raw_bin_s=2.0, bin_s=2.0)
        heavy = LineRecord(0.0, 1.0e-19, 0.30e9, 0.70, 0.0, 1e-20)
        c = grid.center_index
        v1 = oracle_absorption([heavy], 250.0, P_REF, grid)[c]
        v2 = oracle_absorption([heavy], 320.0, P_REF, grid)[c]
        # center value ~ 1/gamma_L ~ (T/T_REF)^n for a near-Lorentzian line
        assert v2 / v1 == pytest.approx((320.0 / 250.0) ** 0.70, rel=1e-4)

    def test_multi_line_superposition(self):
        grid = _wide_grid(201, 20e9)
        l1 = LineRecord(-2e9, 5e-20, 0.2e9, 0.7, 300.0 * KB, O2_MASS)
        l2 = LineRecord(3e9, 8e-20, 0.4e9, 0.6, 900.0 * KB, O2_MASS)
        both = oracle_absorption([l1, l2], 260.0, 80000.0, grid)
        sep = (oracle_absorption([l1], 260.0, 80000.0, grid)
               + oracle_absorption([l2], 260.0, 80000.0, grid))
        np.testing.assert_allclose(both, sep, rtol=1e-14)

    def test_domain_validation(self):
        grid = _wide_grid(11, 8e9)
        with pytest.raises(ValueError):
            oracle_absorption([self.LINE], 140.0, 90000.0, grid)
        with pytest.raises(ValueError):
            oracle_absorption([self.LINE], 296.0, 50.0, grid)

    def test_line_record_validation(self):
        with pytest.raises(ValueError):
            LineRecord(0.0, -1.0, 0.3e9, 0.7, 0.0, O2_MASS)
        with pytest.raises(ValueError):
            LineRecord(0.0, 1e-19, -0.1, 0.7, 0.0, O2_MASS)
        with pytest.raises(ValueError):
            LineRecord(0.0, 1e-19, 0.3e9, 0.7, 0.0, 0.0)


class TestRayleighBrillouin:
    def test_gaussian_shape_and_unit_sum(self):
        grid = make_grid(1, 1, 37.5, 21, 8e9, raw_bin_s=2.0, bin_s=2.0)
        T = 260.0
        got = oracle_rayleigh_brillouin(T, 90000.0, grid)
        m_air = M_AIR / N_AVOGADRO
        nu0 = C_LIGHT / 770e-9
        sigma = (nu0 / C_LIGHT) * np.sqrt(2.0 * KB * T / m_air)
        shape = np.exp(-0.5 * (grid.freq_offsets / sigma) ** 2)
        np.testing.assert_allclose(got, shape / shape.sum(), rtol=1e-12)
        assert got.sum() == pytest.approx(1.0, abs=1e-12)

    def test_broadens_with_temperature(self):
        grid = make_grid(1, 1, 37.5, 21, 8e9, raw_bin_s=2.0, bin_s=2.0)
        cold = oracle_rayleigh_brillouin(210.0, 90000.0, grid)
        warm = oracle_rayleigh_brillouin(330.0, 90000.0, grid)
        c = grid.center_index
        assert warm[c] < cold[c]
        assert warm[0] > cold[0]


@pytest.fixture(scope="module")
def xsec_model():
    grid = make_grid(1, 1, 37.5, 21, 8e9, raw_bin_s=2.0, bin_s=2.0)
    lines = [LineRecord(0.0, 1.0e-19, 0.30e9, 0.70, 1500.0 * KB, O2_MASS)]
    oracle = lambda T, P: oracle_absorption(lines, T, P, grid)
    model = train_surrogate(oracle, np.linspace(200.0, 330.0, 15),
                            np.linspace(55000.0, 105000.0, 12),
                            M=8, d=6, quantity="oxygen_xsec")
    return grid, oracle, model


class TestSurrogate:
    def test_training_report_meets_contract(self, xsec_model):
        _, _, model = xsec_model
        assert model.train_report["max_rel_rms"] <= 1e-3
        assert model.train_report["clamp_fraction"] < 1e-3
        assert np.isfinite(model.train_report["condition_number"])

    def test_reconstruction_at_training_points(self, xsec_model):
        _, oracle, model = xsec_model
        for T, P in [(200.0, 55000.0), (330.0, 105000.0), (265.0, 80000.0)]:
            truth = oracle(T, P)
            got, _ = evaluate(model, T, P)
            scale = np.sqrt(np.mean(truth**2))
            assert np.sqrt(np.mean((got - truth) ** 2)) / scale <= 1e-3

    def test_off_grid_accuracy(self, xsec_model):
        _, oracle, model = xsec_model
        rng = np.random.default_rng(3)
        for _ in range(10):
            T = rng.uniform(205.0, 325.0)
            P = rng.uniform(57000.0, 103000.0)
            truth = oracle(T, P)
            got, _ = evaluate(model, T, P)
            scale = np.sqrt(np.mean(truth**2))
            assert np.sqrt(np.mean((got - truth) ** 2)) / scale <= 2e-3

    def test_temperature_derivative_vs_finite_difference(self, xsec_model):
        _, _, model = xsec_model
        h = 0.05
        for T, P in [(240.0, 70000.0), (290.0, 95000.0), (215.0, 60000.0)]:
            _, dT = evaluate(model, T, P)
            lo, _ = evaluate(model, T - h, P)
            hi, _ = evaluate(model, T + h, P)
            fd = (hi - lo) / (2 * h)
            denom = max(np.abs(fd).max(), 1e-30)
            assert np.abs(dT - fd).max() / denom <= 1e-4

    def test_pressure_partial_vs_finite_difference(self, xsec_model):
        _, _, model = xsec_model
        h = 20.0
        T, P = 260.0, 80000.0
        _, _, dP = evaluate_with_partials(model, T, P)
        lo, _ = evaluate(model, T, P - h)
        hi, _ = evaluate(model, T, P + h)
        fd = (hi - lo) / (2 * h)
        assert np.abs(dP - fd).max() / np.abs(fd).max() <= 1e-4

    def test_broadcasting(self, xsec_model):
        grid, _, model = xsec_model
        T = np.array([[220.0, 260.0], [280.0, 300.0]])
        P = np.array([[90000.0, 85000.0], [80000.0, 75000.0]])
        val, dT = evaluate(model, T, P)
        assert val.shape == (2, 2, grid.n_freq)
        for i in range(2):
            for j in range(2):
                v, d = evaluate(model, T[i, j], P[i, j])
                np.testing.assert_allclose(val[i, j], v, rtol=1e-13)
                np.testing.assert_allclose(dT[i, j], d, rtol=1e-13)

    def test_in_domain_mask(self, xsec_model):
        _, _, model = xsec_model
        mask = model.in_domain([150.0, 260.0, 340.0], [80000.0] * 3)
        assert mask.tolist() == [False, True, False]

    def test_negative_reconstruction_clamped(self):
        mean = np.array([1.0, -0.5, 2.0])
        model = SpectroModel(quantity="oxygen_xsec", mean_spectrum=mean,
                             components=np.zeros((0, 3)),
                             coeffs=np.zeros((0, 3)),
                             powers=np.array([[0, 0]]),
                             t_range=(200.0, 300.0),
                             p_range=(60000.0, 100000.0))
        val, dT = evaluate(model, 250.0, 80000.0)
        np.testing.assert_allclose(val, [1.0, 0.0, 2.0])
        np.testing.assert_allclose(dT, 0.0)


class TestRbSurrogate:
    def test_unit_sum_and_derivative_consistency(self):
        grid = make_grid(1, 1, 37.5, 21, 8e9, raw_bin_s=2.0, bin_s=2.0)
        oracle = lambda T, P: oracle_rayleigh_brillouin(T, P, grid)
        model = train_surrogate(oracle, np.linspace(200.0, 330.0, 12),
                                np.linspace(55000.0, 105000.0, 5),
                                M=5, d=4, quantity="rayleigh_brillouin")
        val, dT = evaluate(model, 263.0, 82000.0)
        assert val.sum() == pytest.approx(1.0, abs=1e-12)
        # unit-sum constraint forces the derivative to sum to zero
        assert abs(dT.sum()) <= 1e-15
        h = 0.05
        lo, _ = evaluate(model, 263.0 - h, 82000.0)
        hi, _ = evaluate(model, 263.0 + h, 82000.0)
        fd = (hi - lo) / (2 * h)
        assert np.abs(dT - fd).max() / np.abs(fd).max() <= 1e-4


class TestTrainingFailures:
    def _grid(self):
        return make_grid(1, 1, 37.5, 11, 8e9, raw_bin_s=2.0, bin_s=2.0)

    def test_too_few_samples(self):
        grid = self._grid()
        oracle = lambda T, P: oracle_rayleigh_brillouin(T, P, grid)
        with pytest.raises(SurrogateTrainingError, match="training grid"):
            train_surrogate(oracle, np.array([250.0, 260.0]),
                            np.array([80000.0]), M=2, d=4)

    def test_capacity_too_low_fails_loudly(self):
        grid = self._grid()
        lines = [LineRecord(0.0, 1.0e-19, 0.30e9, 0.70, 1500.0 * KB, O2_MASS)]
        oracle = lambda T, P: oracle_absorption(lines, T, P, grid)
        with pytest.raises(SurrogateTrainingError, match="reconstruction"):
            train_surrogate(oracle, np.linspace(200.0, 330.0, 12),
                            np.linspace(55000.0, 105000.0, 6),
                            M=0, d=2)

    def test_unknown_quantity(self):
        grid = self._grid()
        oracle = lambda T, P: oracle_rayleigh_brillouin(T, P, grid)
        with pytest.raises(ValueError, match="quantity"):
            train_surrogate(oracle, np.linspace(200.0, 330.0, 8),
                            np.linspace(55000.0, 105000.0, 4),
                            quantity="nope")
