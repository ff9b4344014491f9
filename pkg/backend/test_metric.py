"""
Tests for the canonical distance and its closed-form brackets.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from services.config import Settings
from services.errors import ValidationError
from services.metric import (
    ParamPair,
    calibrate_bound_constant,
    check_domination,
    empirical_nu,
    nu,
    nu_bound_ahc,
    nu_bound_tvc,
    rate_slope,
    sample_pairs,
)


def pair(t_a, h_a, t_b, h_b):
    return ParamPair(np.array(t_a, float), np.array(h_a, float), np.array(t_b, float), np.array(h_b, float))


class TestNu:
    def test_identical_pair_is_zero(self, bump):
        assert nu(bump, pair([0.3], [2.0], [0.3], [2.0])) == 0.0

    def test_disjoint_supports(self, dictionary_1d):
        for f in dictionary_1d:
            assert nu(f, pair([0.0], [1.0], [10.0], [1.5])) == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_half_shift_matches_polynomial_integral(self, bump):
        rho = 15 / 16 * quad(lambda u: (1 - u ** 2) * (1 - (u - 0.5) ** 2), -0.5, 1.0)[0]
        value = nu(bump, pair([0.0], [1.0], [0.5], [1.0]), R=64)
        assert value == pytest.approx(math.sqrt(2 - 2 * rho), abs=1e-3)

    def test_symmetric(self, dictionary_1d):
        p = pair([0.1], [3.0], [0.9], [4.2])
        for f in dictionary_1d:
            assert nu(f, p) == nu(f, p.swapped())

    def test_invariant_under_whole_cell_shifts(self, bump):
        base = nu(bump, pair([0.0], [2.0], [0.4], [2.6]))
        moved = nu(bump, pair([3 / 16], [2.0], [0.4 + 3 / 16], [2.6]))
        assert moved == pytest.approx(base, abs=1e-12)

    def test_triangle_inequality(self, dictionary_1d):
        rng = np.random.default_rng(5)
        for f in dictionary_1d:
            for _ in range(25):
                t = rng.uniform(-2, 2, size=3)
                h = rng.uniform(1, 4, size=3)
                ab = nu(f, pair([t[0]], [h[0]], [t[1]], [h[1]]))
                bc = nu(f, pair([t[1]], [h[1]], [t[2]], [h[2]]))
                ac = nu(f, pair([t[0]], [h[0]], [t[2]], [h[2]]))
                assert ac <= ab + bc + 1e-12

    def test_2d(self):
        from services.patterns import make_pattern

        f = make_pattern("quadratic-bump", 2)
        assert nu(f, pair([0, 0], [1, 2], [0, 0], [1, 2])) == 0.0
        assert 0 < nu(f, pair([0, 0], [1, 2], [0.2, 0], [1, 2.2])) < math.sqrt(2)

    def test_low_resolution_rejected(self, bump):
        with pytest.raises(ValidationError):
            nu(bump, pair([0], [1], [0.1], [1]), R=2)

    def test_matches_noise_standard_deviation(self, bump):
        report = empirical_nu(bump, pair([0.0], [2.0], [0.5], [2.4]), draws=4000)
        assert abs(report.empirical_sd ** 2 - report.nu ** 2) <= 4 * report.variance_se


class TestBounds:
    def test_tvc_identical(self):
        assert nu_bound_tvc(2.0, pair([1.0], [2.0], [1.0], [2.0])) == 0.0

    def test_tvc_scale_doubling(self):
        value = nu_bound_tvc(2.0, pair([0.0], [3.0], [0.0], [6.0]), C=1.0)
        assert value == pytest.approx(2.0 * (1.0 + (math.sqrt(2) - 1) ** 2))

    def test_ahc_identical(self):
        assert nu_bound_ahc(0.5, pair([1.0], [2.0], [1.0], [2.0])) == 0.0

    def test_ahc_lipschitz_sums_coincide(self):
        p = pair([0.0], [2.0], [0.0], [3.0])
        dilation = (1.0 / math.sqrt(6.0)) ** 2
        assert nu_bound_ahc(1.0, p, C=1.0) == pytest.approx(2 * dilation)

    def test_ahc_exponent_range(self):
        with pytest.raises(ValidationError):
            nu_bound_ahc(1.5, pair([0], [1], [0], [1]))


class TestDomination:
    def test_pair_sampler_is_seeded(self, bump):
        a = sample_pairs(bump, 5, seed=3)
        b = sample_pairs(bump, 5, seed=3)
        assert all(np.array_equal(x.t_b, y.t_b) and np.array_equal(x.h_b, y.h_b) for x, y in zip(a, b))

    @pytest.mark.parametrize("condition", ["tvc", "ahc"])
    def test_calibrated_constant_dominates_fresh_pairs(self, bump, condition):
        C = calibrate_bound_constant(bump, condition, count=300, seed=0)
        report = check_domination(bump, condition, C=C, count=300, seed=1)
        assert report.passed, report

    def test_default_constants_dominate(self, bump):
        report = check_domination(bump, "tvc", count=200)
        assert report.dominated_fraction == 1.0

    @pytest.mark.parametrize("condition", ["tvc", "ahc"])
    @pytest.mark.parametrize("direction", ["location", "scale", "mixed"])
    def test_rate_slope(self, bump, condition, direction):
        report = rate_slope(bump, condition, direction=direction)
        assert report.passed, report.slope

    @pytest.mark.slow
    @pytest.mark.parametrize("condition", ["tvc", "ahc"])
    def test_all_builtins_dominated(self, dictionary_1d, condition):
        settings = Settings()
        for f in dictionary_1d:
            C = calibrate_bound_constant(f, condition, count=1000, seed=0, settings=settings)
            assert check_domination(f, condition, C=C, count=1000, seed=1, settings=settings).passed, f.name
            assert rate_slope(f, condition).passed, f.name
