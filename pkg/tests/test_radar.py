import math

import numpy as np
import pytest

from ofdmsense import radar, scene
from ofdmsense.radar import (
    Periodogram,
    bin_widths,
    bins_to_physical,
    cfar_threshold,
    detect_strongest,
    load_periodogram,
    periodogram,
    resolutions,
    save_periodogram,
)
from ofdmsense.scene import SPEED_OF_LIGHT, CsiFrame, NoiseSpec, RfConfig, Scatterer

TABLE_CFG = RfConfig.from_frame(1584, 1120, 27.4e9, 120e3, 10e-3)


def small_cfg(n=16, m=8):
    return RfConfig.from_frame(n, m, 27.4e9, 120e3, m * 8.93e-6)


def pow2_cfg(n=64, m=32):
    return RfConfig.from_frame(n, m, 27.4e9, 480e3, m * 2.2321e-6)


def bin_aligned_target(cfg, n_bin, m_bin):
    """Scatterer whose range/velocity sit exactly on padded-grid centers."""
    n_prime = radar.pad_pow2(cfg.n_subcarriers)
    m_prime = radar.pad_pow2(cfg.n_symbols)
    r = n_bin * SPEED_OF_LIGHT / (2 * cfg.subcarrier_spacing_hz * n_prime)
    v = m_bin * SPEED_OF_LIGHT / (2 * cfg.symbol_duration_s * cfg.carrier_hz * m_prime)
    return Scatterer(range_m=r, velocity_mps=v, coeff=1.0 + 0j, role="target"), r, v


class TestPeriodogram:
    def test_zero_frame(self):
        cfg = small_cfg()
        pg = periodogram(CsiFrame(config=cfg, h=np.zeros((16, 8), complex)))
        assert np.all(pg.values == 0.0)
        assert pg.n_prime == 16 and pg.m_prime == 8
        assert pg.doppler_centered

    def test_bin_aligned_peak_value(self):
        cfg = small_cfg()
        target, r, v = bin_aligned_target(cfg, 3, 2)
        frame = scene.synthesize_csi(cfg, [target], None, 0.0)
        pg = periodogram(frame)
        n, m = cfg.n_subcarriers, cfg.n_symbols
        expected = (n * m) ** 2 / (pg.n_prime * pg.m_prime)
        peak = pg.values.max()
        assert peak == pytest.approx(expected, rel=1e-6)
        k0, m0 = np.unravel_index(np.argmax(pg.values), pg.values.shape)
        assert k0 == 3
        assert m0 == pg.m_prime // 2 + 2

    def test_matches_bruteforce_dft(self):
        cfg = small_cfg(16, 8)
        rng = np.random.default_rng(40)
        h = rng.standard_normal((16, 8)) + 1j * rng.standard_normal((16, 8))
        pg = periodogram(CsiFrame(config=cfg, h=h))
        n_prime, m_prime = 16, 8
        oracle = np.zeros((n_prime, m_prime))
        for n in range(n_prime):
            for m in range(m_prime):
                acc = 0.0 + 0.0j
                for k in range(16):
                    for l in range(8):
                        acc += h[k, l] * np.exp(-2j * np.pi * l * m / m_prime) \
                            * np.exp(2j * np.pi * k * n / n_prime)
                oracle[n, m] = abs(acc) ** 2 / (n_prime * m_prime)
        oracle = np.fft.fftshift(oracle, axes=1)
        assert np.allclose(pg.values, oracle, rtol=1e-8, atol=1e-12)

    def test_parseval(self):
        cfg = small_cfg(10, 6)     # padding engaged: 10 -> 16, 6 -> 8
        rng = np.random.default_rng(41)
        h = rng.standard_normal((10, 6)) + 1j * rng.standard_normal((10, 6))
        pg = periodogram(CsiFrame(config=cfg, h=h))
        assert pg.values.sum() == pytest.approx(np.sum(np.abs(h) ** 2), rel=1e-8)

    def test_global_phase_invariance(self):
        cfg = small_cfg()
        rng = np.random.default_rng(42)
        h = rng.standard_normal((16, 8)) + 1j * rng.standard_normal((16, 8))
        a = periodogram(CsiFrame(config=cfg, h=h))
        b = periodogram(CsiFrame(config=cfg, h=np.exp(1j * 1.91) * h))
        assert np.allclose(a.values, b.values, rtol=1e-12, atol=1e-12)

    def test_scalar_leaves_peak_location(self):
        cfg = small_cfg()
        rng = np.random.default_rng(43)
        h = rng.standard_normal((16, 8)) + 1j * rng.standard_normal((16, 8))
        a = periodogram(CsiFrame(config=cfg, h=h))
        b = periodogram(CsiFrame(config=cfg, h=7.5 * h))
        assert np.argmax(a.values) == np.argmax(b.values)


class TestCfar:
    def test_scale_equivariance(self):
        rng = np.random.default_rng(44)
        values = rng.exponential(size=(32, 16))
        pg = Periodogram(values=values, n_prime=32, m_prime=16,
                         n_data=32, m_data=16)
        pg2 = Periodogram(values=3.7 * values, n_prime=32, m_prime=16,
                          n_data=32, m_data=16)
        assert cfar_threshold(pg2, 1e-3) == pytest.approx(
            3.7 * cfar_threshold(pg, 1e-3), rel=1e-12)

    def test_pfa_to_one_gives_zero(self):
        rng = np.random.default_rng(45)
        pg = Periodogram(values=rng.exponential(size=(2, 2)),
                         n_prime=2, m_prime=2, n_data=2, m_data=2)
        near_one = cfar_threshold(pg, math.nextafter(1.0, 0.0))
        assert near_one < cfar_threshold(pg, 0.5) < cfar_threshold(pg, 1e-3)
        assert near_one < 1e-3

    def test_all_zero_flags(self):
        pg = Periodogram(values=np.zeros((8, 8)), n_prime=8, m_prime=8,
                         n_data=8, m_data=8)
        with pytest.warns(UserWarning):
            assert cfar_threshold(pg, 1e-3) == 0.0

    def test_rejects_bad_pfa(self):
        pg = Periodogram(values=np.ones((4, 4)), n_prime=4, m_prime=4,
                         n_data=4, m_data=4)
        with pytest.raises(ValueError):
            cfar_threshold(pg, 0.0)

    def test_noise_only_false_alarm_rate_quick(self):
        # smaller companion of the acceptance check: 2000 frames, wide band
        cfg = pow2_cfg(32, 16)
        noise = NoiseSpec(-90.0)
        rng = np.random.default_rng(46)
        alarms = 0
        trials = 2000
        for _ in range(trials):
            frame = scene.synthesize_csi(cfg, [], noise, 0.0, rng,
                                         keep_meta=False)
            pg = periodogram(frame)
            eta = cfar_threshold(pg, 1e-3)
            if detect_strongest(pg, eta, cfg) is not None:
                alarms += 1
        assert alarms / trials < 8e-3


class TestDetect:
    def test_symmetric_neighbors_zero_offset(self):
        cfg = small_cfg()
        target, r, v = bin_aligned_target(cfg, 4, -2)
        frame = scene.synthesize_csi(cfg, [target], None, 0.3)
        pg = periodogram(frame)
        det = detect_strongest(pg, 0.0, cfg)
        n_frac, m_frac = det.bin_indices
        assert n_frac == pytest.approx(4.0, abs=1e-9)
        assert m_frac == pytest.approx(pg.m_prime / 2 - 2, abs=1e-9)
        assert det.range_m == pytest.approx(r, rel=1e-9)
        assert det.velocity_mps == pytest.approx(v, rel=1e-9)

    # The kernel inversion is exact on noiseless tones; the parabola is the
    # simple fallback whose bias on unwindowed kernels reaches ~0.17 bins.
    @pytest.mark.parametrize("method,tol_bins", [("kernel", 1e-6),
                                                 ("parabolic", 0.2)])
    def test_fractional_offset_sweep(self, method, tol_bins):
        cfg = pow2_cfg(64, 32)
        dr_bin, _ = bin_widths(cfg)
        for frac in (-0.4, -0.25, -0.1, 0.0, 0.15, 0.3, 0.45):
            r = (5 + frac) * dr_bin
            target = Scatterer(range_m=r, velocity_mps=0.0, coeff=1.0 + 0j,
                               role="target")
            frame = scene.synthesize_csi(cfg, [target], None, 0.0)
            pg = periodogram(frame)
            det = detect_strongest(pg, 0.0, cfg, method=method)
            err_bins = abs(det.range_m - r) / dr_bin
            assert err_bins < tol_bins, (method, frac, err_bins)

    def test_below_threshold_returns_none(self):
        cfg = small_cfg()
        target, _, _ = bin_aligned_target(cfg, 4, 1)
        frame = scene.synthesize_csi(cfg, [target], None, 0.0)
        pg = periodogram(frame)
        assert detect_strongest(pg, pg.values.max() * 1.01, cfg) is None

    def test_edge_peak_skips_interpolation(self):
        cfg = small_cfg()
        values = np.full((16, 8), 1e-6)
        values[0, 4] = 1.0                              # peak on the range edge
        values[1, 4] = 0.5
        pg = Periodogram(values=values, n_prime=16, m_prime=8,
                         n_data=16, m_data=8)
        det = detect_strongest(pg, 0.0, cfg)
        assert det.interp_skipped[0]
        assert not det.interp_skipped[1]
        assert det.bin_indices[0] == 0.0

    def test_rejects_negative_threshold(self):
        pg = Periodogram(values=np.ones((4, 4)), n_prime=4, m_prime=4,
                         n_data=4, m_data=4)
        with pytest.raises(ValueError):
            detect_strongest(pg, -1.0, small_cfg())


class TestBinsToPhysical:
    def test_zero_bins(self):
        cfg = small_cfg()
        pg = periodogram(CsiFrame(config=cfg, h=np.zeros((16, 8), complex)))
        r, v = bins_to_physical(0.0, pg.m_prime / 2, pg, cfg)
        assert r == 0.0
        assert v == 0.0

    @pytest.mark.parametrize("velocity", [1.0, -1.0])
    def test_roundtrip_with_sign(self, velocity):
        cfg = pow2_cfg(256, 128)
        target = Scatterer(range_m=7.0, velocity_mps=velocity,
                           coeff=1.0 + 0j, role="target")
        frame = scene.synthesize_csi(cfg, [target], None, 0.9)
        pg = periodogram(frame)
        det = detect_strongest(pg, 0.0, cfg)
        assert det.range_m == pytest.approx(7.0, abs=0.05)
        assert det.velocity_mps == pytest.approx(velocity, abs=0.05)
        assert math.copysign(1.0, det.velocity_mps) == math.copysign(1.0, velocity)

    def test_out_of_grid_rejected(self):
        cfg = small_cfg()
        pg = periodogram(CsiFrame(config=cfg, h=np.zeros((16, 8), complex)))
        with pytest.raises(ValueError):
            bins_to_physical(-1.0, 0.0, pg, cfg)


class TestResolutions:
    def test_table_values(self):
        dr, dv = resolutions(TABLE_CFG)
        assert dr == pytest.approx(0.789, abs=2e-3)
        assert dv == pytest.approx(0.586, abs=2e-3)

    def test_doubling_subcarriers_halves_range_resolution(self):
        cfg1 = small_cfg(16, 8)
        cfg2 = small_cfg(32, 8)
        assert resolutions(cfg1)[0] == pytest.approx(2 * resolutions(cfg2)[0])

    def test_bin_widths_use_padded_sizes(self):
        dr, dv = bin_widths(TABLE_CFG)
        assert dr == pytest.approx(SPEED_OF_LIGHT / (2 * 120e3 * 2048), rel=1e-12)
        assert dv == pytest.approx(
            SPEED_OF_LIGHT / (2 * TABLE_CFG.symbol_duration_s * 27.4e9 * 2048),
            rel=1e-12)


class TestPeriodogramDump:
    def test_roundtrip(self, tmp_path):
        cfg = small_cfg()
        rng = np.random.default_rng(47)
        h = rng.standard_normal((16, 8)) + 1j * rng.standard_normal((16, 8))
        pg = periodogram(CsiFrame(config=cfg, h=h))
        path = tmp_path / "pg.bin"
        save_periodogram(pg, path)
        loaded = load_periodogram(path)
        assert loaded.n_prime == 16 and loaded.m_prime == 8
        assert np.allclose(loaded.values, pg.values, rtol=1e-6)

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"12345678" + bytes(16))
        with pytest.raises(ValueError):
            load_periodogram(path)

    def test_peak_csv(self, tmp_path):
        cfg = small_cfg()
        target, _, _ = bin_aligned_target(cfg, 4, 1)
        frame = scene.synthesize_csi(cfg, [target], None, 0.0)
        pg = periodogram(frame)
        det = detect_strongest(pg, 0.0, cfg)
        path = tmp_path / "peak.csv"
        radar.write_peak_csv(det, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == radar.PEAK_CSV_HEADER
        assert len(lines) == 2
