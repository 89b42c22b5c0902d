"""Constant-velocity Kalman filter over (range, speed) measurements.

The state is x = [r, v] with the transition [[1, dt], [0, 1]] and an
identity measurement model: the detector reports range and speed directly,
observed with additive noise.  A track resets on detection timeout or when
either posterior standard deviation exceeds its configured bound.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import NumericsError
from .radar import resolutions
from .scene import RfConfig

__all__ = [
    "TrackState",
    "KfParams",
    "init_track",
    "predict",
    "update",
    "should_reset",
    "default_initial_covariance",
]


@dataclass(frozen=True)
class TrackState:
    """Posterior [range, speed] estimate with covariance and timing."""

    x: np.ndarray
    p: np.ndarray
    time: float
    last_update_time: float
    initialized: bool = True


@dataclass(frozen=True)
class KfParams:
    """Filter tuning: process/measurement noise, step, and reset bounds."""

    q: np.ndarray
    r: np.ndarray
    dt: float
    t_max: float = 0.5
    sigma_r_max: float = 2.0
    sigma_v_max: float = 2.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @classmethod
    def for_config(cls, config: RfConfig, accel_var: float = 1.0,
                   t_max: float = 0.5, sigma_r_max: float = 2.0,
                   sigma_v_max: float = 2.0) -> "KfParams":
        """Defaults tied to the radar: dt = frame duration, white-acceleration
        process noise, measurement noise at half a resolution cell."""
        dt = config.frame_duration_s
        q = accel_var * np.array([[dt ** 4 / 4.0, dt ** 3 / 2.0],
                                  [dt ** 3 / 2.0, dt ** 2]])
        dr, dv = resolutions(config)
        r = np.diag([(dr / 2.0) ** 2, (dv / 2.0) ** 2])
        return cls(q=q, r=r, dt=dt, t_max=t_max,
                   sigma_r_max=sigma_r_max, sigma_v_max=sigma_v_max)


def default_initial_covariance(config: RfConfig) -> np.ndarray:
    """diag(dr^2, dv^2): one resolution cell of uncertainty per component."""
    dr, dv = resolutions(config)
    return np.diag([dr ** 2, dv ** 2])


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def init_track(z, p0, t0: float = 0.0) -> TrackState:
    """Start a track at the first detection: state = measurement."""
    x = np.asarray(z, dtype=np.float64).reshape(2).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("initial measurement must be finite")
    p = _symmetrize(np.asarray(p0, dtype=np.float64).reshape(2, 2).copy())
    return TrackState(x=x, p=p, time=t0, last_update_time=t0)


def predict(state: TrackState, params: KfParams) -> TrackState:
    """Time update: x <- F x, P <- F P F^T + Q, advancing time by dt."""
    if not state.initialized:
        raise ValueError("cannot predict an uninitialized track")
    f = np.array([[1.0, params.dt], [0.0, 1.0]])
    x = f @ state.x
    p = _symmetrize(f @ state.p @ f.T + params.q)
    return replace(state, x=x, p=p, time=state.time + params.dt)


def update(state: TrackState, z, params: KfParams,
           now: float | None = None) -> TrackState:
    """Measurement update with identity observation model.

    Gain K = P (P + R)^-1; posterior x = x + K (z - x), P = (I - K) P.
    ``now`` stamps the detection time (defaults to the filter time).
    """
    if not state.initialized:
        raise ValueError("cannot update an uninitialized track")
    z = np.asarray(z, dtype=np.float64).reshape(2)
    innovation_cov = state.p + params.r
    try:
        # K = P S^-1; with S symmetric this is solve(S, P)^T.
        gain = np.linalg.solve(innovation_cov, state.p).T
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"innovation covariance is singular: {exc}") from exc
    x = state.x + gain @ (z - state.x)
    p = _symmetrize((np.eye(2) - gain) @ state.p)
    when = state.time if now is None else now
    return replace(state, x=x, p=p, last_update_time=when)


def should_reset(state: TrackState, now: float, params: KfParams):
    """Reset decision: ``(flag, reason)`` with reason one of
    "timeout", "range-std", "speed-std" or None."""
    if not state.initialized:
        raise ValueError("cannot evaluate reset for an uninitialized track")
    if now - state.last_update_time > params.t_max:
        return True, "timeout"
    if np.sqrt(state.p[0, 0]) > params.sigma_r_max:
        return True, "range-std"
    if np.sqrt(state.p[1, 1]) > params.sigma_v_max:
        return True, "speed-std"
    return False, None
