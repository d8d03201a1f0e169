"""Synthetic scene and observation tests: presets, representability,
flux calibration, Poisson sampling, and the designed absorption regime."""

import numpy as np
import pytest

from ptvlidar.forward import extinction, full_forward, optical_depth
from ptvlidar.instrument import CHANNEL_IDS
from ptvlidar.simulator import (PRESETS, build_default_instrument,
                                build_default_suite, calibrate_flux,
                                default_grid, make_scene, observe,
                                state_from_truth)
from ptvlidar.state import realize


class TestScenePresets:
    def test_unknown_preset(self, grid):
        with pytest.raises(ValueError, match="preset"):
            make_scene("foggy", grid)

    def test_shapes(self, grid, linear_scene):
        sc = linear_scene
        assert sc.T.shape == grid.shape()
        assert sc.humidity.shape == grid.shape()
        assert sc.C_mol.shape == (grid.n_range,)
        assert sc.G_on.shape == (grid.n_time,)
        assert sc.T_surface.shape == (grid.n_time,)

    def test_linear_lapse_profile(self, grid, linear_scene):
        T = linear_scene.T
        np.testing.assert_allclose(T[:, 0], 288.15)
        r = grid.range_centers
        target = 288.15 - 6.5e-3 * r
        # representable projection stays close to the generating line
        assert np.max(np.abs(T - target[None, :])) < 0.3
        assert np.all(np.diff(T, axis=1) < 0)

    def test_inversion_has_local_max_between_2_and_3_km(self, grid):
        sc = make_scene("inversion", grid, seed=0)
        r = grid.range_centers
        for t in range(0, grid.n_time, 7):
            prof = sc.T[t]
            local = [k for k in range(1, r.size - 1)
                     if prof[k] > prof[k - 1] and prof[k] >= prof[k + 1]]
            assert local, "no interior local maximum"
            assert any(2000.0 <= r[k] <= 3000.0 for k in local)

    def test_isothermal(self, grid):
        sc = make_scene("isothermal", grid, seed=0)
        np.testing.assert_allclose(sc.T, 288.15, atol=1e-9)

    def test_cloudy_blobs(self, grid):
        sc = make_scene("cloudy", grid, seed=3)
        blob = sc.blob_mask()
        assert blob.sum() > 10
        assert np.all(sc.dispersion[blob] > 1.0)
        base = make_scene("linear_lapse", grid, seed=3)
        assert sc.B[blob].max() > 10 * base.B[blob].max()
        np.testing.assert_allclose(sc.B[~blob], base.B[~blob])

    def test_physical_ranges(self, grid, linear_scene):
        sc = linear_scene
        assert np.all(sc.B >= 1.0)
        assert np.all(sc.phi > 0)
        assert np.all(sc.humidity >= 0)
        assert np.all(sc.C_mol >= 1.0)
        assert sc.C_mol[0] == pytest.approx(1.0)


class TestStateFromTruth:
    def test_realize_round_trip(self, grid, linear_scene):
        st = state_from_truth(linear_scene, grid)
        ph = realize(st, grid)
        np.testing.assert_allclose(ph.phi, linear_scene.phi, rtol=1e-10)
        np.testing.assert_allclose(ph.B, linear_scene.B, rtol=1e-10)
        np.testing.assert_allclose(ph.C_wv, linear_scene.C_wv, rtol=1e-10)
        np.testing.assert_allclose(ph.C_mol, linear_scene.C_mol, rtol=1e-10)
        np.testing.assert_allclose(ph.G_on, linear_scene.G_on, rtol=1e-12)
        # truth T is projected onto the coarse basis, so exact recovery
        np.testing.assert_allclose(ph.T, linear_scene.T, atol=1e-9)

    def test_humidity_units(self, grid, linear_scene):
        from ptvlidar.state import HUMIDITY_TO_NUMBER
        st = state_from_truth(linear_scene, grid)
        ph = realize(st, grid)
        np.testing.assert_allclose(
            ph.n, linear_scene.humidity * HUMIDITY_TO_NUMBER, rtol=1e-12)


class TestSpectroSuite:
    def test_roles_and_contracts(self, suite):
        assert set(suite) == {"o2on", "o2off", "wv_on", "wv_off"}
        assert suite["wv_on"].oxygen is None
        assert suite["wv_off"].oxygen is None
        assert suite["o2on"].water is not None
        for tag, sp in suite.items():
            for model in (sp.oxygen, sp.water, sp.rayleigh):
                if model is not None:
                    assert model.train_report["max_rel_rms"] <= 1e-3, tag

    def test_online_absorption_regime(self, grid, suite, linear_scene):
        # one-way online o2 optical depth reaches the designed ~0.7 by the
        # top of the scene; offline stays negligible
        st = state_from_truth(linear_scene, grid)
        ph = realize(st, grid)
        om = {}
        for tag in ("o2on", "o2off"):
            sp = suite[tag]
            kappa = extinction(ph.n, ph.T, ph.P, sp.oxygen, sp.water)
            om[tag] = optical_depth(kappa, grid, range_axis=1).omega
        c = grid.center_index
        on_top = om["o2on"][:, -1, c]
        assert 0.4 < on_top.mean() < 1.0
        assert om["o2off"][:, -1, c].mean() < 0.02
        # online absorption must respond to temperature: the hot-band lower
        # state makes the cross section rise steeply with T
        o2 = suite["o2on"].oxygen
        from ptvlidar.spectroscopy import evaluate
        lo, _ = evaluate(o2, 260.0, 90000.0)
        hi, _ = evaluate(o2, 276.0, 90000.0)
        assert hi[c] / lo[c] > 1.3


class TestCalibrateFlux:
    def test_peak_subbin_rate_hits_target(self, grid, suite, linear_scene,
                                          instrument):
        st = state_from_truth(linear_scene, grid)
        res = full_forward(st, instrument, suite, grid)
        denom = grid.n_subbins * grid.raw_bin_duration
        peak = max(float(res.expected[cid].max()) / denom
                   for cid in CHANNEL_IDS)
        assert peak == pytest.approx(1e6, rel=1e-6)

    def test_gains_scaled_uniformly(self, grid, suite, linear_scene):
        base = build_default_instrument(grid)
        cal = calibrate_flux(linear_scene, base, suite, grid)
        ratios = {cid: cal.channels[cid].gain / base.channels[cid].gain
                  for cid in CHANNEL_IDS}
        vals = np.array(list(ratios.values()))
        np.testing.assert_allclose(vals, vals[0], rtol=1e-12)


class TestObserve:
    def test_deterministic(self, grid, suite, linear_scene, instrument):
        a = observe(linear_scene, instrument, suite, grid, seed=9)
        b = observe(linear_scene, instrument, suite, grid, seed=9)
        for cid in CHANNEL_IDS:
            np.testing.assert_array_equal(a.channels[cid].counts,
                                          b.channels[cid].counts)
        c = observe(linear_scene, instrument, suite, grid, seed=10)
        assert not np.array_equal(a.channels["wv_on"].counts,
                                  c.channels["wv_on"].counts)

    def test_counts_match_expectation_statistically(self, grid, suite,
                                                    linear_scene, instrument,
                                                    observations):
        st = state_from_truth(linear_scene, grid)
        res = full_forward(st, instrument, suite, grid)
        for cid in CHANNEL_IDS:
            total = observations.channels[cid].counts.sum()
            expect = res.expected[cid].sum()
            # 5 sigma on the channel total
            assert abs(total - expect) < 5.0 * np.sqrt(expect), cid

    def test_shot_fraction_is_one(self, observations):
        assert observations.shot_fraction == 1.0

    def test_subbin_statistics_consistent(self, grid, observations):
        co = observations.channels["o2off_comb"]
        assert co.counts.shape == grid.shape()
        assert np.all(co.max_sub <= co.counts)
        assert np.all(co.mean_sub * grid.n_subbins
                      == pytest.approx(co.counts))
        assert np.all((co.wprime >= 0) & (co.wprime <= 1))

    def test_cloud_cells_overdispersed_and_downweighted(self, grid, suite):
        scene = make_scene("cloudy", grid, seed=5)
        instrument = calibrate_flux(scene, build_default_instrument(grid),
                                    suite, grid)
        obs = observe(scene, instrument, suite, grid, seed=6)
        blob = scene.blob_mask()
        frac_low = np.mean(obs.channels["o2off_comb"].wprime[blob] < 0.5)
        assert frac_low >= 0.9
        # the logistic tops out at 0.5 (z >= 0), so healthy cells sit just
        # under it; blob cells must fall visibly below that shelf
        clear = ~blob
        med_clear = np.median(obs.channels["o2off_comb"].wprime[clear])
        med_blob = np.median(obs.channels["o2off_comb"].wprime[blob])
        assert med_blob < med_clear - 0.04
