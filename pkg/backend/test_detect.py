"""
Tests for thresholds, calibration, decisions and the power analysis.
"""

import math

import numpy as np
import pytest

from services.config import Settings
from services.detect import (
    CalibrationCache,
    PowerInputs,
    ThresholdSpec,
    calibrate_K,
    calibration_key,
    corollary_mu,
    decide,
    miss_probability,
    mc_threshold,
    power_gap,
    smallest_K,
    theoretical_spec,
    theoretical_threshold,
    threshold_branches,
    type2_bound,
)
from services.errors import GeometryError, InsufficientReplicatesError
from services.net import build_net
from services.patterns import builtin_dictionary
from services.scan import Geometry, PamssResult, v_h
from services.simulate import SimConfig, null_statistics, run_experiment

GEOMETRY = Geometry(d=1, L=8, R=8)


def result_with(E_n: float) -> PamssResult:
    return PamssResult(best_pattern="quadratic-bump", E_n=E_n, n=1,
                       per_pattern_scores={"quadratic-bump": E_n}, per_tensor=[])


class TestTheoreticalThreshold:
    def test_reference_value(self):
        value = theoretical_threshold(10, math.e, math.exp(-1), 100.0, 1.0)
        assert value == pytest.approx(math.sqrt(2) * math.log(math.log(100.0)), rel=1e-12)
        assert threshold_branches(10, math.e, math.exp(-1), 100.0, 1.0)["regime"] == 1

    def test_single_pattern_independent_of_n(self):
        a = theoretical_threshold(10, 1, 0.1, 100.0, 1.0)
        b = theoretical_threshold(1000, 1, 0.1, 100.0, 1.0)
        assert a == b

    def test_second_regime(self):
        branches = threshold_branches(2, 1000, 0.01, 100.0, 4.0)
        assert branches["regime"] == 2
        q = math.log(1000 / 0.01)
        assert branches["value"] == pytest.approx(4.0 / math.sqrt(2) * q * math.log(math.log(100.0)))

    def test_continuous_at_switch(self):
        n, size, delta, L = 50, 4, 0.05, 256.0
        K = n / math.log(size / delta)
        branches = threshold_branches(n, size, delta, L, K)
        assert branches["at_boundary"]
        assert branches["branch1"] == pytest.approx(branches["branch2"], rel=1e-12)

    def test_monotone_in_size_and_delta(self):
        values = [theoretical_threshold(20, size, 0.05, 256.0, 2.0) for size in (1, 2, 4, 8, 64)]
        assert values == sorted(values)
        values = [theoretical_threshold(20, 4, delta, 256.0, 2.0) for delta in (0.2, 0.1, 0.05, 0.01)]
        assert values == sorted(values)

    def test_small_L_rejected(self):
        with pytest.raises(GeometryError):
            theoretical_threshold(10, 4, 0.05, math.e, 1.0)

    def test_spec_carries_regime(self):
        spec = theoretical_spec(10, 4, 0.05, 256.0, 1.0)
        assert spec.method == "theoretical"
        assert spec.regime == 1
        assert spec.value == theoretical_threshold(10, 4, 0.05, 256.0, 1.0)


class TestSmallestK:
    @pytest.mark.parametrize("quantile", [0.5, 3.0, 40.0])
    def test_inverts_threshold(self, quantile):
        n, size, delta, L = 10, 4, 0.05, 256.0
        K = smallest_K(quantile, n, size, delta, L)
        assert theoretical_threshold(n, size, delta, L, K) >= quantile
        assert theoretical_threshold(n, size, delta, L, 0.99 * K) < quantile

    def test_non_positive_quantile(self):
        assert smallest_K(-1.0, 10, 4, 0.05, 256.0) == 0.0


class TestMonteCarloThreshold:
    def test_delta_one_is_minimum(self, dictionary_1d):
        net = build_net(8, 1, epsilon=0.25)
        null = np.array([3.0, -1.0, 2.0, 5.0, 0.5])
        spec = mc_threshold(GEOMETRY, dictionary_1d, net, 1, 1.0, 5, 0, null_values=null)
        assert spec.value == -1.0

    def test_decreasing_delta_raises_threshold(self, dictionary_1d):
        net = build_net(8, 1, epsilon=0.25)
        null = np.random.default_rng(0).normal(size=400)
        values = [mc_threshold(GEOMETRY, dictionary_1d, net, 1, delta, 400, 0, null_values=null).value
                  for delta in (0.5, 0.1, 0.05, 0.0125)]
        assert values == sorted(values)

    def test_insufficient_replicates(self, dictionary_1d):
        net = build_net(8, 1, epsilon=0.25)
        with pytest.raises(InsufficientReplicatesError):
            mc_threshold(GEOMETRY, dictionary_1d, net, 1, 0.01, 100, 0)

    def test_simulated_null(self, dictionary_1d):
        net = build_net(8, 1, epsilon=0.25)
        spec = mc_threshold(GEOMETRY, dictionary_1d, net, 2, 0.1, 50, 3)
        assert spec.reps == 50 and spec.seed == 3
        assert len(spec.null_values) == 50
        assert "null_values" not in spec.model_dump()


class TestDecide:
    def test_boundary_does_not_reject(self):
        spec = theoretical_spec(10, 4, 0.05, 256.0, 1.0)
        assert decide(result_with(spec.value), spec).reject is False

    def test_huge_statistic_rejects(self):
        spec = theoretical_spec(10, 4, 0.05, 256.0, 1.0)
        report = decide(result_with(1e12), spec)
        assert report.reject is True
        assert report.p_value_estimate is None

    def test_p_value_from_null(self):
        spec = ThresholdSpec(method="monte_carlo", delta=0.2, n=1, dict_size=1, L=8.0, value=3.0,
                             reps=5, seed=0, null_values=[1.0, 2.0, 3.0, 4.0, 5.0])
        report = decide(result_with(3.0), spec)
        assert report.p_value_estimate == pytest.approx(0.6)
        assert report.report()["reject"] is False

    def test_monte_carlo_spec_needs_lineage(self):
        with pytest.raises(ValueError):
            ThresholdSpec(method="monte_carlo", delta=0.1, n=1, dict_size=1, L=8.0, value=1.0)


class TestCalibrateK:
    def test_covers_every_quantile(self, bump):
        net = build_net(8, 1, epsilon=0.25)
        null = null_statistics(GEOMETRY, [bump], net, 1, 100, 0)
        calibration = calibrate_K(GEOMETRY, [bump], net, 1, reps=100, null_values=null)
        for delta in Settings().delta_grid:
            quantile = calibration.quantiles[str(delta)]
            assert theoretical_threshold(1, 1, delta, 8.0, calibration.K) >= quantile
        binding = max(calibration.per_delta, key=calibration.per_delta.get)
        assert calibration.K == calibration.per_delta[binding]
        assert calibration.ci_low <= calibration.ci_high

    def test_doubling_dictionary_does_not_raise_K(self, dictionary_1d):
        net = build_net(8, 1, epsilon=0.25)
        pair = [dictionary_1d[0], dictionary_1d[2]]
        # same seed, so both dictionaries scan identical null tensors
        base_null = null_statistics(GEOMETRY, pair, net, 10, 200, seed=7)
        doubled_null = null_statistics(GEOMETRY, dictionary_1d, net, 10, 200, seed=7)
        assert np.all(doubled_null >= base_null - 1e-12)

        base = calibrate_K(GEOMETRY, pair, net, 10, reps=200, seed=7, null_values=base_null)
        doubled = calibrate_K(GEOMETRY, dictionary_1d, net, 10, reps=200, seed=7, null_values=doubled_null)
        for delta in Settings().delta_grid:
            assert doubled.quantiles[str(delta)] >= base.quantiles[str(delta)]
        # the quantile rises by no more than the threshold's log |F| term allows
        assert doubled.K <= base.ci_high

    def test_needs_hundred_replicates(self, bump):
        net = build_net(8, 1, epsilon=0.25)
        with pytest.raises(InsufficientReplicatesError):
            calibrate_K(GEOMETRY, [bump], net, 1, reps=50)

    def test_cache_round_trip(self, tmp_path, bump):
        net = build_net(8, 1, epsilon=0.25)
        null = np.linspace(0.5, 4.0, 120)
        calibration = calibrate_K(GEOMETRY, [bump], net, 1, reps=120, null_values=null,
                                  settings=Settings(bootstrap_reps=0))
        cache = CalibrationCache(str(tmp_path / "cache.json"))
        cache.put(calibration)
        key = calibration_key(GEOMETRY, [bump], net, 1)
        assert cache.get(key).K == calibration.K
        assert cache.get("missing") is None


class TestPower:
    def test_type2_at_zero(self):
        pw = PowerInputs(mu=4.0, scales=[[4.0], [8.0]], L=256.0, epsilon=0.25)
        assert type2_bound(pw, 0.0).bound == 0.5

    def test_exact_centering_without_net_error(self):
        pw = PowerInputs(mu=4.0, scales=[[4.0], [8.0], [16.0]], L=256.0)
        bound = type2_bound(pw, 1.0)
        assert bound.centering == pytest.approx((4.0 * pw.M_n - pw.V_n) / math.sqrt(3))
        assert bound.spread == pytest.approx(math.sqrt(pw.V_n / 3))

    def test_equal_scales_collapse(self):
        pw = PowerInputs(mu=5.0, scales=[[8.0]] * 6, L=256.0)
        assert power_gap(pw) == pytest.approx(5.0 - math.sqrt(2) * v_h([8.0], 256.0))

    def test_zero_gap_at_corollary_amplitude(self):
        scales = [[4.0], [6.0], [16.0]]
        mu = corollary_mu(scales, 256.0)
        assert power_gap(PowerInputs(mu=mu, scales=scales, L=256.0)) == pytest.approx(0.0, abs=1e-12)

    def test_miss_probability_grows_with_threshold(self):
        pw = PowerInputs(mu=6.0, scales=[[4.0]] * 10, L=256.0)
        assert miss_probability(pw, 5.0) < miss_probability(pw, 10.0)

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            PowerInputs(mu=1.0, scales=[[300.0]], L=256.0)

    def test_type2_bound_dominates_simulated_miss_rate(self, bump):
        net = build_net(64, 1, epsilon=0.25)
        h = next(g.scale for g in net.groups if g.scale[0] >= 4.0).tolist()
        n, reps, mu = 5, 60, 3.0
        config = SimConfig(d=1, L=64, R=8, n=n, seed=13, hypothesis="H1", pattern="quadratic-bump",
                           mu=mu, scale_law="fixed", h=h)
        summary = run_experiment(config, [bump], net, theoretical_spec(n, 1, 0.05, 64.0, 1.0), replicates=reps)
        E_n = summary.table.groupby("replicate")["E_n"].first().to_numpy()

        pw = PowerInputs(mu=mu, scales=[h] * n, L=64.0, epsilon=0.25)
        for u in (-1.0, 0.0, 1.0):
            bound = type2_bound(pw, u)
            miss = float(np.mean(E_n < bound.centering + u * bound.spread))
            assert miss <= bound.bound + 3 * math.sqrt(bound.bound * (1 - bound.bound) / reps), (u, miss)

    def test_stronger_signal_raises_E_n(self, dictionary_1d):
        net = build_net(8, 1, epsilon=0.25)
        spec = theoretical_spec(4, 4, 0.05, 8.0, 1.0)
        means = []
        for mu in (2.0, 6.0):
            config = SimConfig(d=1, L=8, R=8, n=4, seed=5, hypothesis="H1", pattern="quadratic-bump",
                               mu=mu, h_min=1.0, h_max=2.0)
            means.append(run_experiment(config, dictionary_1d, net, spec, replicates=10).mean_E_n)
        assert means[1] > means[0]


@pytest.mark.slow
def test_holdout_false_positive_rate():
    dictionary = builtin_dictionary(1)
    geometry = Geometry(d=1, L=256, R=16)
    net = build_net(256, 1, epsilon=0.25)
    spec = mc_threshold(geometry, dictionary, net, 10, 0.05, 500, seed=100)
    holdout = null_statistics(geometry, dictionary, net, 10, 500, seed=200)
    assert np.mean(holdout > spec.value) <= 0.05 + 3 * math.sqrt(0.05 * 0.95 / 500)
