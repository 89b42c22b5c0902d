import math

import numpy as np
import pytest

from ofdmsense import scene
from ofdmsense.scene import (
    SPEED_OF_LIGHT,
    CsiFrame,
    DopplerAmbiguityWarning,
    NoiseSpec,
    RfConfig,
    ScenarioParams,
    Scatterer,
    attenuation,
    generate_scenario,
    steering_doppler,
    steering_range,
    synthesize_csi,
)

TABLE_CFG = RfConfig.from_frame(
    n_subcarriers=1584, n_symbols=1120, carrier_hz=27.4e9,
    subcarrier_spacing_hz=120e3, frame_duration_s=10e-3)


def small_cfg(n=16, m=8):
    return RfConfig.from_frame(n, m, 27.4e9, 120e3, m * 8.9286e-6)


class TestRfConfig:
    def test_symbol_duration_from_frame(self):
        assert TABLE_CFG.symbol_duration_s == pytest.approx(10e-3 / 1120)

    def test_inconsistent_frame_rejected(self):
        with pytest.raises(ValueError):
            RfConfig(n_subcarriers=8, n_symbols=8, carrier_hz=1e9,
                     subcarrier_spacing_hz=1e5, symbol_duration_s=1e-5,
                     frame_duration_s=1.0)

    def test_too_small_grid_rejected(self):
        with pytest.raises(ValueError):
            RfConfig.from_frame(1, 8, 1e9, 1e5, 1e-3)


class TestSteeringRange:
    def test_zero_range_all_ones(self):
        v = steering_range(small_cfg(), 0.0)
        assert np.allclose(v, np.ones(16), atol=1e-15)

    def test_quarter_wavelength_distance(self):
        cfg = small_cfg()
        r = SPEED_OF_LIGHT / (4 * cfg.subcarrier_spacing_hz)
        v = steering_range(cfg, r)
        assert v[1] == pytest.approx(-1.0 + 0j, abs=1e-12)

    def test_phase_at_25m_table_parameters(self):
        v = steering_range(TABLE_CFG, 25.0)
        expected = -4 * math.pi * 120e3 * 25.0 / SPEED_OF_LIGHT
        assert np.angle(v[1]) == pytest.approx(expected, rel=1e-12)
        # numerically about -0.1257 rad
        assert np.angle(v[1]) == pytest.approx(-0.1257, abs=2e-4)

    def test_negative_range_rejected(self):
        with pytest.raises(ValueError):
            steering_range(small_cfg(), -1.0)


class TestSteeringDoppler:
    def test_zero_velocity_all_ones(self):
        v = steering_doppler(small_cfg(), 0.0)
        assert np.allclose(v, np.ones(8), atol=1e-15)

    def test_half_turn_velocity(self):
        cfg = small_cfg()
        v_half = SPEED_OF_LIGHT / (4 * cfg.symbol_duration_s * cfg.carrier_hz)
        with pytest.warns(DopplerAmbiguityWarning):
            v = steering_doppler(cfg, v_half)
        assert v[1] == pytest.approx(-1.0 + 0j, abs=1e-12)

    def test_conjugate_symmetry(self):
        cfg = small_cfg()
        fwd = steering_doppler(cfg, 1.3)
        back = steering_doppler(cfg, -1.3)
        assert np.allclose(np.conj(fwd), back, atol=1e-15)

    def test_ambiguity_warning(self):
        cfg = small_cfg()
        limit = SPEED_OF_LIGHT / (4 * cfg.symbol_duration_s * cfg.carrier_hz)
        with pytest.warns(DopplerAmbiguityWarning):
            steering_doppler(cfg, 1.01 * limit)


class TestSynthesizeCsi:
    def test_single_static_scatterer_rank_one(self):
        cfg = small_cfg()
        s = Scatterer(range_m=5.0, velocity_mps=0.0, coeff=1.0 + 0j)
        frame = synthesize_csi(cfg, [s], None, 0.0)
        expected_col = steering_range(cfg, 5.0)
        for col in range(cfg.n_symbols):
            assert np.allclose(frame.h[:, col], expected_col, atol=1e-12)
        sig = np.linalg.svd(frame.h, compute_uv=False)
        assert sig[1] <= 1e-12 * sig[0]

    def test_empty_scene_zero(self):
        frame = synthesize_csi(small_cfg(), [], None, 1.0)
        assert np.all(frame.h == 0)

    def test_two_scatterers_elementwise_oracle(self):
        cfg = small_cfg()
        s1 = Scatterer(range_m=3.0, velocity_mps=1.0, coeff=0.5 - 0.25j)
        s2 = Scatterer(range_m=9.0, velocity_mps=-0.7, coeff=-1.5 + 2.0j,
                       role="target")
        phase = 0.77
        frame = synthesize_csi(cfg, [s1, s2], None, phase)
        oracle = np.zeros((cfg.n_subcarriers, cfg.n_symbols), dtype=complex)
        for s in (s1, s2):
            for k in range(cfg.n_subcarriers):
                for l in range(cfg.n_symbols):
                    ph_r = -4 * math.pi * k * cfg.subcarrier_spacing_hz * s.range_m / SPEED_OF_LIGHT
                    ph_v = 4 * math.pi * l * cfg.symbol_duration_s * cfg.carrier_hz * s.velocity_mps / SPEED_OF_LIGHT
                    oracle[k, l] += s.coeff * np.exp(1j * (ph_r + ph_v))
        oracle *= np.exp(1j * phase)
        assert np.allclose(frame.h, oracle, atol=1e-12)

    def test_global_phase_is_exact_scalar(self):
        cfg = small_cfg()
        s = Scatterer(range_m=5.0, velocity_mps=0.4, coeff=1.0 + 1.0j)
        base = synthesize_csi(cfg, [s], None, 0.0)
        rotated = synthesize_csi(cfg, [s], None, 1.234)
        ratio = rotated.h / base.h
        assert np.allclose(ratio, np.exp(1j * 1.234), atol=1e-12)

    def test_noise_statistics(self):
        cfg = RfConfig.from_frame(1000, 1000, 27.4e9, 120e3, 1000 * 8.93e-6)
        noise = NoiseSpec(total_noise_power_dbm=-90.0)
        rng = np.random.default_rng(11)
        frame = synthesize_csi(cfg, [], noise, 0.0, rng)
        measured = np.mean(np.abs(frame.h) ** 2)
        expected = noise.per_element_variance(1000)
        assert measured == pytest.approx(expected, rel=0.01)

    def test_noise_requires_rng(self):
        with pytest.raises(ValueError):
            synthesize_csi(small_cfg(), [], NoiseSpec(-90.0), 0.0, rng=None)

    def test_separability_column_ratios(self):
        cfg = small_cfg()
        s = Scatterer(range_m=7.0, velocity_mps=1.2, coeff=2.0 + 0j)
        frame = synthesize_csi(cfg, [s], None, 0.3)
        # outer-product structure: all columns are proportional
        ratios = frame.h[:, 1:] / frame.h[:, :1]
        assert np.allclose(ratios, ratios[0:1, :], atol=1e-10)


class TestNoiseSpec:
    def test_per_element_variance(self):
        spec = NoiseSpec(total_noise_power_dbm=-90.0)
        assert spec.per_element_variance(1584) == pytest.approx(1e-9 / 1584)

    def test_off_is_zero(self):
        assert NoiseSpec.off().per_element_variance(10) == 0.0


class TestAttenuation:
    def test_doubling_range_quarters_amplitude(self):
        cfg = small_cfg()
        assert attenuation(5.0, cfg) / attenuation(10.0, cfg) == pytest.approx(4.0)

    def test_formula_value(self):
        cfg = small_cfg()
        lam = SPEED_OF_LIGHT / cfg.carrier_hz
        expected = lam / ((4 * math.pi) ** 1.5 * 100.0)
        assert attenuation(10.0, cfg) == pytest.approx(expected, rel=1e-12)

    def test_zero_range_rejected(self):
        with pytest.raises(ValueError):
            attenuation(0.0, small_cfg())

    def test_configurable_exponent(self):
        cfg = small_cfg()
        assert attenuation(2.0, cfg, amplitude_exponent=1.0) / \
            attenuation(4.0, cfg, amplitude_exponent=1.0) == pytest.approx(2.0)


class TestGenerateScenario:
    def test_counts(self):
        params = ScenarioParams(n_clutter=5)
        rng = np.random.default_rng(12)
        clutter_s, target = generate_scenario(params, small_cfg(), rng)
        assert len(clutter_s) == 5
        assert all(s.role == "clutter" and s.velocity_mps == 0.0 for s in clutter_s)
        assert target.role == "target"

    def test_deterministic_replay(self):
        params = ScenarioParams()
        a = generate_scenario(params, small_cfg(), np.random.default_rng(13))
        b = generate_scenario(params, small_cfg(), np.random.default_rng(13))
        assert a == b

    def test_velocity_sampler_statistics(self):
        params = ScenarioParams(velocity_max_mps=1.5)
        rng = np.random.default_rng(14)
        cfg = small_cfg()
        velocities = np.array([
            generate_scenario(params, cfg, rng)[1].velocity_mps
            for _ in range(10_000)])
        assert velocities.min() >= -1.5
        assert velocities.max() <= 1.5
        assert abs(velocities.mean()) < 0.05

    def test_ranges_within_bounds(self):
        params = ScenarioParams(range_min_m=2.0, range_max_m=20.0)
        rng = np.random.default_rng(15)
        for _ in range(100):
            clutter_s, target = generate_scenario(params, small_cfg(), rng)
            for s in clutter_s + [target]:
                assert 2.0 <= s.range_m <= 20.0

    def test_clutter_gain_scales_power(self):
        cfg = small_cfg()
        base = ScenarioParams(clutter_gain_db=0.0, n_clutter=40)
        boosted = ScenarioParams(clutter_gain_db=20.0, n_clutter=40)
        c0, _ = generate_scenario(base, cfg, np.random.default_rng(16))
        c1, _ = generate_scenario(boosted, cfg, np.random.default_rng(16))
        p0 = np.mean([abs(s.coeff) ** 2 for s in c0])
        p1 = np.mean([abs(s.coeff) ** 2 for s in c1])
        assert p1 / p0 == pytest.approx(100.0, rel=1e-9)


class TestCsiFrame:
    def test_dimension_check(self):
        with pytest.raises(ValueError):
            CsiFrame(config=small_cfg(), h=np.zeros((4, 4), dtype=complex))
