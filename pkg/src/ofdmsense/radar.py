"""OFDM radar processing: 2-D periodogram, thresholding, peak extraction.

The periodogram transforms a (clutter-rejected) channel matrix with a DFT
across symbols and an unnormalized inverse DFT across subcarriers, both
zero-padded to the next power of two, and scales by 1/(N'M').  Peaks encode
one-way range on the subcarrier axis and signed radial velocity on the
(center-shifted) symbol axis.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import pad_pow2
from .scene import SPEED_OF_LIGHT, CsiFrame, RfConfig

__all__ = [
    "Periodogram",
    "Detection",
    "periodogram",
    "cfar_threshold",
    "detect_strongest",
    "bins_to_physical",
    "resolutions",
    "bin_widths",
    "save_periodogram",
    "load_periodogram",
    "write_peak_csv",
]

PERIODOGRAM_MAGIC = b"CRAPPGRM"


@dataclass
class Periodogram:
    """Non-negative power surface on the padded range-Doppler grid.

    ``values`` is N' x M'; the Doppler axis is center-shifted so column
    M'/2 is zero velocity and lower indices are negative (approaching)
    velocities.  ``n_data``/``m_data`` keep the pre-padding frame dims,
    which fix the transform kernel shape used for peak interpolation.
    """

    values: np.ndarray
    n_prime: int
    m_prime: int
    n_data: int
    m_data: int
    doppler_centered: bool = True


@dataclass
class Detection:
    """Strongest-peak measurement after fractional-bin interpolation."""

    range_m: float
    velocity_mps: float
    peak_power: float
    bin_indices: tuple
    above_threshold: bool = True
    interp_skipped: tuple = (False, False)


def periodogram(frame: CsiFrame) -> Periodogram:
    """Range-Doppler power surface of one frame.

    S(n, m) = |IDFT_subcarriers(DFT_symbols(H))|^2 / (N' M'), computed on
    the zero-padded power-of-two grid, then center-shifted along Doppler.
    The global per-frame phase rotation cancels in the magnitude.
    """
    cfg = frame.config
    n_prime = pad_pow2(cfg.n_subcarriers)
    m_prime = pad_pow2(cfg.n_symbols)
    spec = np.fft.fft(frame.h, n=m_prime, axis=1)
    spec = np.fft.ifft(spec, n=n_prime, axis=0) * n_prime
    values = (spec.real ** 2 + spec.imag ** 2) / (n_prime * m_prime)
    values = np.fft.fftshift(values, axes=1)
    return Periodogram(values=values, n_prime=n_prime, m_prime=m_prime,
                       n_data=cfg.n_subcarriers, m_data=cfg.n_symbols)


def cfar_threshold(pg: Periodogram, p_fa: float) -> float:
    """Detection threshold for a target frame-level false-alarm probability.

    The noise level is estimated robustly as median/ln(2) (exact for
    exponentially distributed noise-only bins, insensitive to a strong
    peak), and the threshold is set so the probability that *any* bin of a
    noise-only frame exceeds it equals ``p_fa``:

        eta = -mu * ln(1 - (1 - p_fa)^(1 / (N' M')))
    """
    if not 0.0 < p_fa < 1.0:
        raise ValueError("p_fa must be in (0, 1)")
    med = float(np.median(pg.values))
    if med <= 0.0:
        warnings.warn("degenerate all-zero periodogram; threshold set to 0")
        return 0.0
    mu = med / math.log(2.0)
    n_bins = pg.n_prime * pg.m_prime
    exceed = -math.expm1(math.log1p(-p_fa) / n_bins)   # 1 - (1-p)^(1/B)
    return -mu * math.log(exceed)


def _kernel_ratio(delta: float, p_data: int, p_padded: int) -> float:
    """|D(delta - 1)| / |D(delta)| for the zero-padded transform kernel
    D(x) = sin(pi rho x) / sin(pi x / P'), rho = P/P'."""
    return _kernel_mag(delta - 1.0, p_data, p_padded) / \
        _kernel_mag(delta, p_data, p_padded)


def _kernel_mag(x: float, p_data: int, p_padded: int) -> float:
    if abs(x) < 1e-9 / p_padded:
        return float(p_data)
    return abs(math.sin(math.pi * x * p_data / p_padded) /
               math.sin(math.pi * x / p_padded))


def _fractional_offset_kernel(amp_lo: float, amp_peak: float, amp_hi: float,
                              p_data: int, p_padded: int) -> float:
    """Fractional peak offset from the peak bin and its larger neighbor.

    Inverts the known transform-kernel magnitude ratio; exact for a single
    noiseless component, unlike a parabola fit, whose bias on the
    unwindowed kernel reaches ~0.15 bins.
    """
    sign = 1.0 if amp_hi >= amp_lo else -1.0
    neighbor = max(amp_hi, amp_lo)
    if amp_peak <= 0.0 or neighbor <= 0.0:
        return 0.0
    ratio = neighbor / amp_peak
    lo, hi = 0.0, 0.5
    if _kernel_ratio(lo, p_data, p_padded) >= ratio:
        return 0.0
    if _kernel_ratio(hi, p_data, p_padded) <= ratio:
        return sign * 0.5
    for _ in range(60):                      # bisection; monotone in delta
        mid = 0.5 * (lo + hi)
        if _kernel_ratio(mid, p_data, p_padded) < ratio:
            lo = mid
        else:
            hi = mid
    return sign * 0.5 * (lo + hi)


def _fractional_offset_parabolic(s_lo: float, s_peak: float, s_hi: float) -> float:
    """Classic three-point parabola vertex on 10*log10 values, clamped."""
    floor = s_peak * 1e-300
    a = 10.0 * math.log10(max(s_lo, floor))
    b = 10.0 * math.log10(s_peak)
    g = 10.0 * math.log10(max(s_hi, floor))
    denom = a - 2.0 * b + g
    if denom >= 0.0:
        return 0.0
    return min(0.5, max(-0.5, (a - g) / (2.0 * denom)))


def detect_strongest(pg: Periodogram, eta: float, config: RfConfig,
                     method: str = "kernel") -> Detection | None:
    """Locate the strongest periodogram peak; None if it does not beat eta.

    Fractional bin offsets are estimated independently per axis from the
    peak's immediate neighbors - by inverting the exact transform-kernel
    magnitude ratio (``method="kernel"``, default) or by a three-point
    log-domain parabola (``method="parabolic"``).  A peak on an array edge
    skips interpolation on that axis and flags it.
    """
    if eta < 0:
        raise ValueError("threshold must be non-negative")
    if method not in ("kernel", "parabolic"):
        raise ValueError(f"unknown interpolation method {method!r}")
    s = pg.values
    flat = int(np.argmax(s))
    k0, m0 = np.unravel_index(flat, s.shape)
    peak = float(s[k0, m0])
    if peak <= eta:
        return None

    offsets = [0.0, 0.0]
    skipped = [False, False]
    for axis, (idx, size, data) in enumerate(
            [(k0, pg.n_prime, pg.n_data), (m0, pg.m_prime, pg.m_data)]):
        if idx == 0 or idx == size - 1:
            skipped[axis] = True
            continue
        lo = float(s[k0 - 1, m0]) if axis == 0 else float(s[k0, m0 - 1])
        hi = float(s[k0 + 1, m0]) if axis == 0 else float(s[k0, m0 + 1])
        if method == "kernel":
            offsets[axis] = _fractional_offset_kernel(
                math.sqrt(lo), math.sqrt(peak), math.sqrt(hi), data, size)
        else:
            offsets[axis] = _fractional_offset_parabolic(lo, peak, hi)

    n_frac = k0 + offsets[0]
    m_frac = m0 + offsets[1]
    range_m, velocity = bins_to_physical(n_frac, m_frac, pg, config)
    return Detection(range_m=range_m, velocity_mps=velocity, peak_power=peak,
                     bin_indices=(n_frac, m_frac), above_threshold=True,
                     interp_skipped=tuple(skipped))


def bins_to_physical(n_frac: float, m_frac: float, pg: Periodogram,
                     config: RfConfig):
    """Convert fractional grid indices to (range, signed velocity)."""
    if not (0 <= n_frac <= pg.n_prime and 0 <= m_frac <= pg.m_prime):
        raise ValueError("fractional indices fall outside the grid")
    range_m = n_frac * SPEED_OF_LIGHT / (2.0 * config.subcarrier_spacing_hz * pg.n_prime)
    velocity = (m_frac - pg.m_prime / 2.0) * SPEED_OF_LIGHT / (
        2.0 * config.symbol_duration_s * config.carrier_hz * pg.m_prime)
    return range_m, velocity


def resolutions(config: RfConfig):
    """Theoretical resolutions (dr, dv) = (c/(2 N df), c df/(2 M fc))."""
    dr = SPEED_OF_LIGHT / (2.0 * config.n_subcarriers * config.subcarrier_spacing_hz)
    dv = SPEED_OF_LIGHT * config.subcarrier_spacing_hz / (
        2.0 * config.n_symbols * config.carrier_hz)
    return dr, dv


def bin_widths(config: RfConfig):
    """Physical width of one padded-grid bin along each axis."""
    n_prime = pad_pow2(config.n_subcarriers)
    m_prime = pad_pow2(config.n_symbols)
    dr = SPEED_OF_LIGHT / (2.0 * config.subcarrier_spacing_hz * n_prime)
    dv = SPEED_OF_LIGHT / (2.0 * config.symbol_duration_s * config.carrier_hz * m_prime)
    return dr, dv


def save_periodogram(pg: Periodogram, path) -> None:
    """Dump the power surface: magic, N' and M' (u32), float32 row-major."""
    with open(path, "wb") as fh:
        fh.write(PERIODOGRAM_MAGIC)
        fh.write(struct.pack("<II", pg.n_prime, pg.m_prime))
        fh.write(np.ascontiguousarray(pg.values, dtype="<f4").tobytes())


def load_periodogram(path) -> Periodogram:
    with open(path, "rb") as fh:
        magic = fh.read(len(PERIODOGRAM_MAGIC))
        if magic != PERIODOGRAM_MAGIC:
            raise ValueError(f"{path}: not a periodogram dump (bad magic {magic!r})")
        n_prime, m_prime = struct.unpack("<II", fh.read(8))
        payload = fh.read()
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if values.shape[0] != n_prime * m_prime:
        raise ValueError(f"{path}: truncated periodogram payload")
    return Periodogram(values=values.reshape(n_prime, m_prime),
                       n_prime=n_prime, m_prime=m_prime,
                       n_data=n_prime, m_data=m_prime)


PEAK_CSV_HEADER = "range_m,velocity_mps,peak_power,n_frac,m_frac,above_threshold"


def detection_csv_row(det: Detection | None) -> str:
    if det is None:
        return "nan,nan,nan,nan,nan,False"
    return (f"{det.range_m:.6f},{det.velocity_mps:.6f},{det.peak_power:.6e},"
            f"{det.bin_indices[0]:.4f},{det.bin_indices[1]:.4f},{det.above_threshold}")


def write_peak_csv(det: Detection | None, path) -> None:
    """One-line CSV record of a detection, for external plotting."""
    with open(path, "w") as fh:
        fh.write(PEAK_CSV_HEADER + "\n")
        fh.write(detection_csv_row(det) + "\n")
