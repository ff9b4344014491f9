"""
Tests for epsilon-net construction, snapping and coverage.
"""

import numpy as np
import pytest

from services.config import Settings
from services.errors import GeometryError, NetSizeError
from services.net import (
    NetSpec,
    build_locations,
    build_net,
    build_net_from_spec,
    build_scales,
    calibrate_net_constants,
    gamma_for_dictionary,
    offsets_to_locations,
    params_for_epsilon,
    refine_net,
    snap_offsets,
    verify_net,
)
from services.patterns import BUILTIN_KINDS, make_pattern
from services.scan import Geometry


class TestParams:
    def test_unit_constants(self):
        alpha, beta = params_for_epsilon(0.01, 1.0, 2, C_alpha=1, C_beta=1)
        assert alpha == pytest.approx(0.01)
        assert beta == pytest.approx(1.01)

    def test_holder_exponent_sharpens_spacing(self):
        alpha, _ = params_for_epsilon(0.04, 0.5, 1, C_alpha=1)
        assert alpha == pytest.approx(0.0016)

    @pytest.mark.parametrize("epsilon", [0.0, -0.1, 1.5])
    def test_bad_epsilon(self, epsilon):
        with pytest.raises(GeometryError):
            params_for_epsilon(epsilon, 1.0, 1)

    def test_gamma_from_dictionary(self, dictionary_1d):
        assert gamma_for_dictionary(dictionary_1d) == 1.0
        rough = dictionary_1d[0].model_copy(update={"gamma2": 0.5})
        assert gamma_for_dictionary([rough, *dictionary_1d[1:]]) == 0.5


class TestScalesAndLocations:
    def test_scales_drop_L(self):
        assert [h.tolist() for h in build_scales(8, 2, 1)] == [[1.0], [2.0], [4.0]]

    def test_scales_2d_product(self):
        scales = build_scales(8, 2, 2)
        assert len(scales) == 9
        assert {tuple(h) for h in scales} == {(a, b) for a in (1.0, 2.0, 4.0) for b in (1.0, 2.0, 4.0)}

    def test_scales_non_dividing_ratio(self):
        assert [h.tolist() for h in build_scales(10, 3, 1)] == [[1.0], [3.0], [9.0]]

    def test_locations_1d(self):
        locations = build_locations([2.0], 8, 0.5)
        assert locations.shape == (13, 1)
        assert np.array_equal(locations[:, 0], np.arange(-6, 7, dtype=float))

    def test_locations_degenerate_interval(self):
        locations = build_locations([8 - 1e-12], 8, 0.5)
        assert locations.shape == (1, 1)
        assert locations[0, 0] == 0.0

    def test_locations_2d(self):
        assert build_locations([1.0, 1.0], 8, 1.0).shape == (225, 2)

    def test_locations_reject_scale_at_L(self):
        with pytest.raises(GeometryError):
            build_locations([8.0], 8, 0.5)


class TestBuildNet:
    def test_forced_parameters(self):
        net = build_net(8, 1, alpha=0.5, beta=2.0)
        assert [g.size for g in net.groups] == [29, 13, 5]
        assert net.size == 47

    def test_entries_visit_each_point_once(self):
        net = build_net(8, 2, alpha=0.5, beta=2.0)
        keys = [tuple(t) + tuple(h) for t, h in net.entries()]
        assert len(keys) == net.size
        assert len(set(keys)) == net.size

    def test_entries_lie_in_domain(self):
        net = build_net(16, 1, epsilon=0.25)
        for t, h in net.entries():
            assert np.all(h >= 1) and np.all(h < 16)
            assert np.all(np.abs(t) <= 16 - h + 1e-12)

    def test_halving_epsilon_doubles_locations(self):
        coarse = build_net(64, 1, epsilon=0.2)
        fine = build_net(64, 1, epsilon=0.1)
        ratio = fine.groups[0].size / coarse.groups[0].size
        assert 1.8 <= ratio <= 2.2

    def test_size_cap_names_parameters(self):
        with pytest.raises(NetSizeError, match="alpha=0.5"):
            build_net(8, 1, alpha=0.5, beta=2.0, max_entries=10)

    def test_needs_epsilon_or_parameters(self):
        with pytest.raises(GeometryError):
            build_net(8, 1)

    def test_from_spec_overrides_constants(self):
        spec = NetSpec(L=16, d=1, epsilon=0.25, C_alpha=0.5)
        net = build_net_from_spec(spec, Settings())
        assert net.alpha == pytest.approx(0.125)

    def test_summary(self):
        summary = build_net(8, 1, alpha=0.5, beta=2.0).summary()
        assert summary["size"] == 47
        assert summary["scales"][1] == {"h": [2.0], "locations": 13}


class TestRefine:
    def test_refined_net_is_superset(self):
        net = build_net(16, 1, epsilon=0.25)
        fine = refine_net(net, 4)
        fine_entries = {tuple(t) + tuple(h) for t, h in fine.entries()}
        for t, h in net.entries():
            assert tuple(t) + tuple(h) in fine_entries
        assert fine.size > 4 * net.size

    def test_factor_one_is_identity(self):
        net = build_net(8, 1, alpha=0.5, beta=2.0)
        assert refine_net(net, 1).size == net.size


class TestSnap:
    geometry = Geometry(d=1, L=8, R=16)

    def test_aligned_locations_round_trip(self):
        locations = np.arange(-6, 7, dtype=float).reshape(-1, 1)
        offsets = snap_offsets(locations, (32,), self.geometry)
        assert np.array_equal(offsets_to_locations(offsets, (32,), self.geometry), locations)

    def test_offsets_stay_valid_and_sorted(self):
        locations = np.linspace(-7.2, 7.2, 50).reshape(-1, 1)
        offsets = snap_offsets(locations, (35,), self.geometry)
        assert offsets.min() >= 0 and offsets.max() <= 256 - 35
        assert np.all(np.diff(offsets[:, 0]) > 0)

    def test_oversized_footprint(self):
        with pytest.raises(GeometryError):
            snap_offsets(np.zeros((1, 1)), (300,), self.geometry)


class TestCoverage:
    @pytest.mark.parametrize("kind", BUILTIN_KINDS)
    def test_default_constants_cover_every_builtin(self, kind):
        f = make_pattern(kind, 1)
        net = build_net(32, 1, epsilon=0.25)
        report = verify_net(net, f, 0.25, trials=200, seed=0)
        assert report.covered_fraction == 1.0, (kind, report.worst_t, report.worst_h)
        assert report.max_min_distance <= 0.25

    def test_inflated_alpha_loses_coverage(self, bump):
        net = build_net(32, 1, epsilon=0.25)
        sparse = build_net(32, 1, alpha=20 * net.alpha, beta=net.beta)
        report = verify_net(sparse, bump, 0.25, trials=200, seed=0)
        assert report.covered_fraction < 1.0

    def test_dimension_mismatch(self, bump):
        net = build_net(8, 2, alpha=0.5, beta=2.0)
        with pytest.raises(GeometryError):
            verify_net(net, bump, 0.25)

    @pytest.mark.slow
    def test_calibration_finds_covering_pair(self, bump):
        result = calibrate_net_constants(bump, 32, 1, 0.25)
        assert result["coverage"]["quadratic-bump"]["covered_fraction"] == 1.0
        assert result["C_alpha"] in (1.0, 0.5, 0.25, 0.125)

    @pytest.mark.slow
    def test_calibration_covers_whole_dictionary(self, dictionary_1d):
        result = calibrate_net_constants(dictionary_1d, 32, 1, 0.25)
        assert set(result["coverage"]) == set(BUILTIN_KINDS)
        assert all(r["covered_fraction"] == 1.0 for r in result["coverage"].values())
        assert result["worst_pattern"] in BUILTIN_KINDS

    def test_calibration_needs_a_pattern(self):
        with pytest.raises(GeometryError):
            calibrate_net_constants([], 32, 1, 0.25)
