"""Synthetic CSI frames for a scene of point scatterers.

The channel of one radio frame is modeled as a sum of outer products: each
reflector at range r and radial velocity v contributes
``alpha * a(r) b(v)^T`` where ``a`` carries the two-way range phase ramp
across subcarriers and ``b`` the Doppler phase ramp across symbols.  A
global unit-modulus rotation (constant within a frame, arbitrary across
frames) models the TX/RX clock incoherence, and additive noise is
circularly-symmetric complex Gaussian per element.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "SPEED_OF_LIGHT",
    "DopplerAmbiguityWarning",
    "RfConfig",
    "Scatterer",
    "CsiFrame",
    "NoiseSpec",
    "ScenarioParams",
    "steering_range",
    "steering_doppler",
    "synthesize_csi",
    "generate_scenario",
    "attenuation",
    "draw_coefficient",
    "rician_fading",
    "fluctuate",
    "expand_scatterers",
]

SPEED_OF_LIGHT = 299_792_458.0


class DopplerAmbiguityWarning(UserWarning):
    """A velocity exceeds the unambiguous Doppler interval and will alias."""


@dataclass(frozen=True)
class RfConfig:
    """Radio-frame parameters: grid sizes, carrier, spacing and timing."""

    n_subcarriers: int
    n_symbols: int
    carrier_hz: float
    subcarrier_spacing_hz: float
    symbol_duration_s: float
    frame_duration_s: float

    def __post_init__(self):
        if self.n_subcarriers < 2 or self.n_symbols < 2:
            raise ValueError("need at least 2 subcarriers and 2 symbols")
        if min(self.carrier_hz, self.subcarrier_spacing_hz,
               self.symbol_duration_s, self.frame_duration_s) <= 0:
            raise ValueError("carrier, spacing and durations must be positive")
        expected = self.symbol_duration_s * self.n_symbols
        if abs(expected - self.frame_duration_s) > 1e-9 * self.frame_duration_s:
            raise ValueError(
                f"symbol_duration_s * n_symbols = {expected} does not match "
                f"frame_duration_s = {self.frame_duration_s}")

    @classmethod
    def from_frame(cls, n_subcarriers: int, n_symbols: int, carrier_hz: float,
                   subcarrier_spacing_hz: float, frame_duration_s: float) -> "RfConfig":
        """Build a config with the symbol duration derived as frame/M."""
        return cls(
            n_subcarriers=n_subcarriers,
            n_symbols=n_symbols,
            carrier_hz=carrier_hz,
            subcarrier_spacing_hz=subcarrier_spacing_hz,
            symbol_duration_s=frame_duration_s / n_symbols,
            frame_duration_s=frame_duration_s,
        )


@dataclass(frozen=True)
class Scatterer:
    """One reflector: one-way range, signed radial velocity (positive =
    receding), complex reflection coefficient, and its role in the scene.

    ``extent_m`` > 0 models an extended reflector (a wall, a cabinet, a
    multipath cluster) whose echo is spread over a small range interval
    centered on ``range_m``; it is synthesized as a fixed fan of sub-points
    sharing the total mean power."""

    range_m: float
    velocity_mps: float
    coeff: complex
    role: str = "clutter"
    extent_m: float = 0.0

    def __post_init__(self):
        if not self.range_m > 0:
            raise ValueError("scatterer range must be positive")
        if not (np.isfinite(self.coeff) and math.isfinite(self.velocity_mps)):
            raise ValueError("scatterer parameters must be finite")
        if self.role not in ("clutter", "target"):
            raise ValueError(f"unknown scatterer role {self.role!r}")
        if self.extent_m < 0 or self.extent_m / 2.0 >= self.range_m:
            raise ValueError("extent must be non-negative and smaller than 2r")


@dataclass
class CsiFrame:
    """One sensing acquisition: the N x M channel matrix plus metadata."""

    config: RfConfig
    h: np.ndarray
    meta: dict | None = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.complex128)
        expected = (self.config.n_subcarriers, self.config.n_symbols)
        if self.h.shape != expected:
            raise ValueError(f"frame shape {self.h.shape} != config {expected}")


@dataclass(frozen=True)
class NoiseSpec:
    """Total noise power over the full band, in dBm (linear units are
    arbitrary but consistent with the scatterer amplitude calibration).
    Per-element variance is total/N."""

    total_noise_power_dbm: float

    def per_element_variance(self, n_subcarriers: int) -> float:
        return 10.0 ** (self.total_noise_power_dbm / 10.0) / n_subcarriers

    @classmethod
    def off(cls) -> "NoiseSpec":
        return cls(total_noise_power_dbm=-math.inf)


@dataclass(frozen=True)
class ScenarioParams:
    """Random-scene parameters for Monte Carlo trials.

    Clutter reflectors are static with ranges uniform in
    (range_min_m, range_max_m]; the single target draws a uniform range and
    a velocity uniform in +-velocity_max_mps.  Coefficient magnitudes are a
    Rician draw scaled by free-space attenuation; ``ref_rx_power_dbm`` pins
    the mean per-element received power of a unit Rician reflector at
    ``ref_range_m``.  ``clutter_gain_db`` makes environment reflectors
    (walls, cabinets) stronger than the target, which is what makes removal
    necessary in the first place.
    """

    n_clutter: int = 5
    range_min_m: float = 1.0
    range_max_m: float = 25.0
    velocity_max_mps: float = 1.5
    rician_k_db: float = 10.0
    ref_rx_power_dbm: float = -115.0
    ref_range_m: float = 10.0
    clutter_gain_db: float = 10.0
    clutter_extent_m: float = 0.0
    path_loss_amplitude_exponent: float = 2.0

    def __post_init__(self):
        if self.n_clutter < 0:
            raise ValueError("n_clutter must be >= 0")
        if not 0 < self.range_min_m < self.range_max_m:
            raise ValueError("need 0 < range_min_m < range_max_m")
        if self.velocity_max_mps <= 0:
            raise ValueError("velocity_max_mps must be positive")
        if self.clutter_extent_m < 0 or self.clutter_extent_m / 2.0 >= self.range_min_m:
            raise ValueError("clutter extent must be non-negative and < 2*range_min_m")


def steering_range(config: RfConfig, r: float) -> np.ndarray:
    """Range steering vector: element k = exp(-j 4 pi k df r / c)."""
    if r < 0:
        raise ValueError("range must be non-negative")
    k = np.arange(config.n_subcarriers)
    phase = 4.0 * math.pi * config.subcarrier_spacing_hz * r / SPEED_OF_LIGHT
    return np.exp(-1j * phase * k)


def steering_doppler(config: RfConfig, v: float) -> np.ndarray:
    """Doppler steering vector: element l = exp(+j 4 pi l T0 fc v / c).

    Warns when |v| exceeds the unambiguous interval (two-way Doppler beyond
    half the symbol rate), in which case the phase ramp aliases.
    """
    normalized = 2.0 * abs(v) * config.symbol_duration_s * config.carrier_hz / SPEED_OF_LIGHT
    if normalized >= 0.5:
        warnings.warn(
            f"velocity {v} m/s aliases: |v| * 2 T0 fc / c = {normalized:.3f} >= 0.5",
            DopplerAmbiguityWarning, stacklevel=2)
    l = np.arange(config.n_symbols)
    phase = 4.0 * math.pi * config.symbol_duration_s * config.carrier_hz * v / SPEED_OF_LIGHT
    return np.exp(1j * phase * l)


def synthesize_csi(config: RfConfig, scatterers, noise: NoiseSpec | None,
                   phase_rad: float, rng: np.random.Generator | None = None,
                   keep_meta: bool = True) -> CsiFrame:
    """Synthesize one CSI frame: global-phase-rotated scatterer sum plus noise.

    ``H = exp(j phase) * sum_p alpha_p a(r_p) b(v_p)^T + Z`` with Z i.i.d.
    circularly-symmetric complex Gaussian of the per-element variance given
    by ``noise`` (variance split equally over real/imaginary parts).
    """
    n, m = config.n_subcarriers, config.n_symbols
    scatterers = expand_scatterers(scatterers)
    if scatterers:
        a = np.column_stack([steering_range(config, s.range_m) for s in scatterers])
        b = np.column_stack([steering_doppler(config, s.velocity_mps) for s in scatterers])
        alphas = np.array([s.coeff for s in scatterers], dtype=np.complex128)
        h = np.exp(1j * phase_rad) * ((a * alphas) @ b.T)
    else:
        h = np.zeros((n, m), dtype=np.complex128)

    sigma2 = noise.per_element_variance(n) if noise is not None else 0.0
    if sigma2 > 0.0:
        if rng is None:
            raise ValueError("rng is required when noise power is non-zero")
        scale = math.sqrt(sigma2 / 2.0)
        h = h + scale * (rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m)))

    meta = None
    if keep_meta:
        meta = {
            "scatterers": tuple(scatterers),
            "noise_power_dbm": noise.total_noise_power_dbm if noise else -math.inf,
            "phase_rad": phase_rad,
        }
    return CsiFrame(config=config, h=h, meta=meta)


def attenuation(r: float, config: RfConfig, amplitude_exponent: float = 2.0) -> float:
    """Two-way free-space amplitude factor lambda / ((4 pi)^1.5 r^exponent).

    The default exponent 2 on amplitude gives the monostatic radar-equation
    1/r^4 power law; it is configurable for experimentation.
    """
    if r <= 0:
        raise ValueError("attenuation is singular at r <= 0")
    lam = SPEED_OF_LIGHT / config.carrier_hz
    return lam / ((4.0 * math.pi) ** 1.5 * r ** amplitude_exponent)


# Sub-points used to synthesize one extended reflector.
_EXTENT_SUBPOINTS = 5


def expand_scatterers(scatterers):
    """Replace extended reflectors by their sub-point fans.

    An extent-e reflector becomes ``_EXTENT_SUBPOINTS`` point reflectors
    evenly spaced over [r - e/2, r + e/2], each carrying an equal share of
    the mean power.  Point reflectors pass through unchanged.
    """
    out = []
    for s in scatterers:
        if s.extent_m == 0.0:
            out.append(s)
            continue
        offsets = np.linspace(-s.extent_m / 2.0, s.extent_m / 2.0,
                              _EXTENT_SUBPOINTS)
        w = 1.0 / math.sqrt(_EXTENT_SUBPOINTS)
        for off in offsets:
            out.append(replace(s, range_m=s.range_m + off,
                               coeff=s.coeff * w, extent_m=0.0))
    return out


def rician_fading(rng: np.random.Generator, k_db: float) -> complex:
    """Unit-mean-square-power complex Rician fading factor.

    The line-of-sight fraction (set by the K-factor) is a fixed real gain;
    the diffuse remainder is a fresh circular Gaussian draw, so repeated
    calls model acquisition-to-acquisition fluctuation of a reflector.
    """
    kappa = 10.0 ** (k_db / 10.0)
    los = math.sqrt(kappa / (kappa + 1.0))
    scatter = math.sqrt(1.0 / (2.0 * (kappa + 1.0)))
    return los + scatter * complex(rng.standard_normal(), rng.standard_normal())


def fluctuate(scatterers, k_db: float, rng: np.random.Generator):
    """One acquisition's realization of a scene: every reflection point
    (extended reflectors expand to their sub-points first) keeps its mean
    coefficient and is modulated by an independent Rician fading draw.

    Without this fluctuation K stacked acquisitions of a static scene
    would differ only by their global phase and span a single dimension,
    no matter how many reflectors are present.
    """
    return [replace(s, coeff=s.coeff * rician_fading(rng, k_db))
            for s in expand_scatterers(scatterers)]


def draw_coefficient(params: ScenarioParams, config: RfConfig,
                     rng: np.random.Generator, r: float,
                     gain_db: float = 0.0) -> complex:
    """Mean complex reflection coefficient for a scatterer at range r:
    free-space attenuation and a uniform phase, scaled so a reflector at
    the reference range has mean per-element received power
    ``ref_rx_power_dbm + gain_db``.  Per-acquisition Rician fading is
    applied separately (see :func:`fluctuate`)."""
    scale = math.sqrt(10.0 ** ((params.ref_rx_power_dbm + gain_db) / 10.0))
    scale /= attenuation(params.ref_range_m, config,
                         params.path_loss_amplitude_exponent)
    mag = scale * attenuation(r, config, params.path_loss_amplitude_exponent)
    return mag * complex(np.exp(1j * rng.uniform(0.0, 2.0 * math.pi)))


def generate_scenario(params: ScenarioParams, config: RfConfig,
                      rng: np.random.Generator):
    """Draw one random scene: static clutter reflectors plus one target.

    Returns ``(clutter, target)`` where ``clutter`` is a list of static
    scatterers and ``target`` a moving one.  The draw order is fixed
    (clutter ranges, clutter coefficients, then target range, velocity,
    coefficient) so a seeded generator replays bit-identical scenes.
    """
    clutter = []
    ranges = [rng.uniform(params.range_min_m, params.range_max_m)
              for _ in range(params.n_clutter)]
    for r in ranges:
        clutter.append(Scatterer(
            range_m=r, velocity_mps=0.0,
            coeff=draw_coefficient(params, config, rng, r, params.clutter_gain_db),
            role="clutter", extent_m=params.clutter_extent_m))
    r_t = rng.uniform(params.range_min_m, params.range_max_m)
    v_t = rng.uniform(-params.velocity_max_mps, params.velocity_max_mps)
    target = Scatterer(
        range_m=r_t, velocity_mps=v_t,
        coeff=draw_coefficient(params, config, rng, r_t, 0.0),
        role="target")
    return clutter, target
