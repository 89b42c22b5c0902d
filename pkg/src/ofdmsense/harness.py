"""Monte Carlo evaluation and end-to-end replays.

A trial draws a random scene (static clutter + one moving target), records
K clutter-only acquisitions at the trial's noise power, calibrates the
configured removers from them, then runs the full detection chain on one
runtime frame containing the target.  A detection counts only if the peak
beats the CFAR threshold *and* both the range and speed errors are below
the theoretical resolutions; misses are penalized with one grid-bin width
in the RMSE aggregation.

Every trial owns an independent, replayable random stream derived from
(seed, point index, trial index), so trials are order-independent and the
leading records never change when the trial count grows.
"""

from __future__ import annotations

import configparser
import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import clutter, radar, scene, tracker
from .numerics import NumericsError
from .scene import CsiFrame, NoiseSpec, RfConfig, ScenarioParams

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "TrialRecord",
    "SweepRow",
    "SweepResult",
    "TrackLogRow",
    "load_config",
    "run_trial",
    "compute_pmd",
    "compute_rmse",
    "sweep",
    "write_results_csv",
    "replay_track",
    "write_track_csv",
    "load_trajectory",
]

REMOVERS = ("none", "crap", "eca-c", "eca-s")

RESULTS_SCHEMA_VERSION = 1
TRACK_SCHEMA_VERSION = 1

# Sub-stream tags so different consumers of one experiment seed never collide.
_STREAM_SWEEP = 0
_STREAM_TRACK = 1
_STREAM_ACQUIRE = 2


class ConfigError(Exception):
    """Invalid or unreadable experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one simulation campaign needs, parsed from one INI file."""

    rf: RfConfig
    scenario: ScenarioParams
    noise_sweep_dbm: tuple
    trials: int
    p_fa: float
    removers: tuple
    snapshot_count: int
    order: object = "auto"
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.noise_sweep_dbm:
            raise ConfigError("noise sweep must contain at least one point")
        if not self.removers:
            raise ConfigError("at least one remover must be configured")
        for rm in self.removers:
            if rm not in REMOVERS:
                raise ConfigError(f"unknown remover {rm!r}; expected one of {REMOVERS}")
        if not 0.0 < self.p_fa < 1.0:
            raise ConfigError("p_fa must be in (0, 1)")
        if self.snapshot_count < 1:
            raise ConfigError("snapshot count must be >= 1")
        if self.order != "auto":
            if not isinstance(self.order, int) or self.order < 1:
                raise ConfigError("order must be 'auto' or a positive integer")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def load_config(path) -> ExperimentConfig:
    """Parse a key = value experiment config (sections documented in the
    shipped example configs)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    try:
        rf_sec = parser["rf"]
        n = int(float(rf_sec["n_subcarriers"]))
        m = int(float(rf_sec["n_symbols"]))
        carrier = float(rf_sec["carrier_hz"])
        spacing = float(rf_sec["subcarrier_spacing_hz"])
        if "symbol_duration_s" in rf_sec:
            t0 = float(rf_sec["symbol_duration_s"])
            frame = float(rf_sec.get("frame_duration_s", t0 * m))
        elif "frame_duration_s" in rf_sec:
            frame = float(rf_sec["frame_duration_s"])
            t0 = frame / m
        else:
            raise KeyError("symbol_duration_s or frame_duration_s")
        rf = RfConfig(n_subcarriers=n, n_symbols=m, carrier_hz=carrier,
                      subcarrier_spacing_hz=spacing, symbol_duration_s=t0,
                      frame_duration_s=frame)

        sc = parser["scenario"] if parser.has_section("scenario") else {}
        defaults = ScenarioParams()
        scenario = ScenarioParams(
            n_clutter=int(sc.get("n_clutter", defaults.n_clutter)),
            range_min_m=float(sc.get("range_min_m", defaults.range_min_m)),
            range_max_m=float(sc.get("range_max_m", defaults.range_max_m)),
            velocity_max_mps=float(sc.get("velocity_max_mps", defaults.velocity_max_mps)),
            rician_k_db=float(sc.get("rician_k_db", defaults.rician_k_db)),
            ref_rx_power_dbm=float(sc.get("ref_rx_power_dbm", defaults.ref_rx_power_dbm)),
            ref_range_m=float(sc.get("ref_range_m", defaults.ref_range_m)),
            clutter_gain_db=float(sc.get("clutter_gain_db", defaults.clutter_gain_db)),
            clutter_extent_m=float(sc.get("clutter_extent_m", defaults.clutter_extent_m)),
        )

        cl = parser["clutter"]
        k = int(cl["snapshots"])
        order_raw = cl.get("order", "auto").strip()
        order = "auto" if order_raw == "auto" else int(order_raw)

        p_fa = float(parser["detection"]["p_fa"])

        sw = parser["sweep"]
        noise = tuple(float(v) for v in sw["noise_dbm"].split(","))
        trials = int(sw["trials"])
        removers = tuple(v.strip() for v in sw["removers"].split(","))

        seed = int(parser["run"].get("seed", "0")) if parser.has_section("run") else 0
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"config {path}: {exc}") from exc

    return ExperimentConfig(rf=rf, scenario=scenario, noise_sweep_dbm=noise,
                            trials=trials, p_fa=p_fa, removers=removers,
                            snapshot_count=k, order=order, seed=seed)


@dataclass(frozen=True)
class TrialRecord:
    """Outcome of one trial for one remover, with the truth it was run on."""

    truth_range_m: float
    truth_velocity_mps: float
    remover: str
    noise_dbm: float
    detected: bool
    est_range_m: float
    est_velocity_mps: float
    peak_power: float
    valid_detection: bool
    clutter_ranges_m: tuple

    def csv_row(self) -> str:
        return (f"{self.remover},{self.noise_dbm:.3f},"
                f"{self.truth_range_m:.9f},{self.truth_velocity_mps:.9f},"
                f"{self.detected},{self.est_range_m:.9f},"
                f"{self.est_velocity_mps:.9f},{self.peak_power:.9e},"
                f"{self.valid_detection}")


def trial_rng(seed: int, point_index: int, trial_index: int) -> np.random.Generator:
    """Independent, replayable stream for one (sweep point, trial) pair."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_SWEEP, point_index, trial_index]))


def acquisition_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_ACQUIRE]))


def track_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_TRACK]))


def acquire_snapshot_matrix(rf: RfConfig, scatterers, noise: NoiseSpec,
                            count: int, rng: np.random.Generator,
                            fading_k_db: float | None = None) -> clutter.ClutterSnapshots:
    """Record ``count`` clutter-only acquisitions directly into the stacked
    snapshot matrix.  Every acquisition gets fresh noise, a fresh global
    phase, and (when ``fading_k_db`` is given) a fresh Rician fading draw
    per reflector."""
    q = rf.n_subcarriers * rf.n_symbols
    c = np.empty((count, q), dtype=np.complex128)
    for i in range(count):
        scats = scene.fluctuate(scatterers, fading_k_db, rng) \
            if fading_k_db is not None else scatterers
        phase = rng.uniform(0.0, 2.0 * math.pi)
        frame = scene.synthesize_csi(rf, scats, noise, phase, rng,
                                     keep_meta=False)
        c[i] = frame.h.reshape(-1, order="F")
    return clutter.ClutterSnapshots(c=c, n_subcarriers=rf.n_subcarriers,
                                    n_symbols=rf.n_symbols)


def _apply_remover(remover: str, frame: CsiFrame, cal, ecac, ecas) -> CsiFrame:
    if remover == "none":
        return frame
    if remover == "crap":
        return clutter.crap_remove(cal, frame)
    if remover == "eca-c":
        return ecac.remove(frame)
    if remover == "eca-s":
        return ecas.remove(frame)
    raise ValueError(f"unknown remover {remover!r}")


def _run_scene(cfg: ExperimentConfig, noise_dbm: float,
               rng: np.random.Generator, removers) -> dict:
    """One random scene evaluated under all requested removers.

    All removers share the identical scene, snapshots and runtime frame
    (the random stream is consumed before any removal), which pairs the
    comparison and keeps replay independent of the remover list.
    """
    clutter_scatterers, target = scene.generate_scenario(cfg.scenario, cfg.rf, rng)
    noise = NoiseSpec(noise_dbm)
    k_db = cfg.scenario.rician_k_db
    snaps = acquire_snapshot_matrix(cfg.rf, clutter_scatterers, noise,
                                    cfg.snapshot_count, rng, fading_k_db=k_db)
    runtime_frame = scene.synthesize_csi(
        cfg.rf, scene.fluctuate(clutter_scatterers + [target], k_db, rng),
        noise, rng.uniform(0.0, 2.0 * math.pi), rng, keep_meta=False)

    cal = clutter.calibrate(snaps, cfg.order, with_hash=False) \
        if "crap" in removers else None
    ecac = clutter.EcaCCanceller(snaps) if "eca-c" in removers else None
    ecas = clutter.EcaSCanceller(snaps) if "eca-s" in removers else None

    dr, dv = radar.resolutions(cfg.rf)
    clutter_ranges = tuple(s.range_m for s in clutter_scatterers)
    records = {}
    for remover in removers:
        cleaned = _apply_remover(remover, runtime_frame, cal, ecac, ecas)
        pg = radar.periodogram(cleaned)
        eta = radar.cfar_threshold(pg, cfg.p_fa)
        det = radar.detect_strongest(pg, eta, cfg.rf)
        if det is None:
            records[remover] = TrialRecord(
                truth_range_m=target.range_m,
                truth_velocity_mps=target.velocity_mps,
                remover=remover, noise_dbm=noise_dbm, detected=False,
                est_range_m=math.nan, est_velocity_mps=math.nan,
                peak_power=math.nan, valid_detection=False,
                clutter_ranges_m=clutter_ranges)
            continue
        valid = (abs(det.range_m - target.range_m) < dr
                 and abs(det.velocity_mps - target.velocity_mps) < dv)
        records[remover] = TrialRecord(
            truth_range_m=target.range_m,
            truth_velocity_mps=target.velocity_mps,
            remover=remover, noise_dbm=noise_dbm, detected=True,
            est_range_m=det.range_m, est_velocity_mps=det.velocity_mps,
            peak_power=det.peak_power, valid_detection=valid,
            clutter_ranges_m=clutter_ranges)
    return records


def run_trial(cfg: ExperimentConfig, noise_dbm: float,
              rng: np.random.Generator, remover: str | None = None) -> TrialRecord:
    """One full trial with the configured (or given) remover."""
    remover = remover or cfg.removers[0]
    return _run_scene(cfg, noise_dbm, rng, (remover,))[remover]


def compute_pmd(records) -> float:
    """Missed-detection probability: fraction of trials without a valid
    detection."""
    records = list(records)
    if not records:
        raise ValueError("cannot compute P_MD of an empty record set")
    valid = sum(1 for r in records if r.valid_detection)
    return 1.0 - valid / len(records)


def compute_rmse(records, which: str, bin_width: float) -> float:
    """Root-mean-square estimation error with the miss penalty.

    Valid detections contribute their absolute error; anything else
    contributes one grid-bin width of the requested axis.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot compute RMSE of an empty record set")
    if which not in ("range", "velocity"):
        raise ValueError("which must be 'range' or 'velocity'")
    total = 0.0
    for r in records:
        if r.valid_detection:
            if which == "range":
                err = abs(r.est_range_m - r.truth_range_m)
            else:
                err = abs(r.est_velocity_mps - r.truth_velocity_mps)
        else:
            err = bin_width
        total += err * err
    return math.sqrt(total / len(records))


@dataclass(frozen=True)
class SweepRow:
    """Aggregated results for one (noise power, remover) grid point."""

    noise_dbm: float
    remover: str
    trials: int
    failures: int
    n_valid: int
    p_md: float
    rmse_range_m: float
    rmse_velocity_mps: float


@dataclass
class SweepResult:
    rows: list
    records: list


def sweep(cfg: ExperimentConfig, progress=None) -> SweepResult:
    """Run the configured noise sweep: every remover at every noise point.

    Trials use per-(point, trial) random streams and are aggregated in
    fixed trial order, so results do not depend on execution order and a
    longer run reproduces a shorter one's leading trials exactly.
    Component failures inside a trial are recorded per point, not raised.
    """
    bw_range, bw_velocity = radar.bin_widths(cfg.rf)
    rows = []
    all_records = []
    for point_index, noise_dbm in enumerate(cfg.noise_sweep_dbm):
        per_remover = {rm: [] for rm in cfg.removers}
        failures = 0
        for trial_index in range(cfg.trials):
            rng = trial_rng(cfg.seed, point_index, trial_index)
            try:
                recs = _run_scene(cfg, noise_dbm, rng, cfg.removers)
            except (NumericsError, np.linalg.LinAlgError) as exc:
                failures += 1
                if progress:
                    progress(f"trial {trial_index} at {noise_dbm} dBm failed: {exc}")
                continue
            for rm, rec in recs.items():
                per_remover[rm].append(rec)
                all_records.append(rec)
        for rm in cfg.removers:
            recs = per_remover[rm]
            if recs:
                row = SweepRow(
                    noise_dbm=noise_dbm, remover=rm, trials=len(recs),
                    failures=failures, n_valid=sum(r.valid_detection for r in recs),
                    p_md=compute_pmd(recs),
                    rmse_range_m=compute_rmse(recs, "range", bw_range),
                    rmse_velocity_mps=compute_rmse(recs, "velocity", bw_velocity))
            else:
                row = SweepRow(noise_dbm=noise_dbm, remover=rm, trials=0,
                               failures=failures, n_valid=0, p_md=math.nan,
                               rmse_range_m=math.nan, rmse_velocity_mps=math.nan)
            rows.append(row)
        if progress:
            progress(f"noise {noise_dbm:+.1f} dBm done "
                     f"({cfg.trials} trials, {failures} failures)")
    return SweepResult(rows=rows, records=all_records)


_RESULTS_HEADER = ("schema_version,noise_dbm,remover,trials,failures,"
                   "n_valid,p_md,rmse_range_m,rmse_velocity_mps")


def write_results_csv(rows, path) -> None:
    """Append sweep rows to a CSV file, writing the header only when the
    file is new or empty (append-safe, schema column first)."""
    need_header = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a") as fh:
        if need_header:
            fh.write(_RESULTS_HEADER + "\n")
        for r in rows:
            fh.write(f"{RESULTS_SCHEMA_VERSION},{r.noise_dbm:.3f},{r.remover},"
                     f"{r.trials},{r.failures},{r.n_valid},{r.p_md:.6f},"
                     f"{r.rmse_range_m:.6f},{r.rmse_velocity_mps:.6f}\n")


# ---------------------------------------------------------------------------
# Tracking replay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrackLogRow:
    time_s: float
    r_meas: float
    v_meas: float
    r_post: float
    v_post: float
    sigma_r: float
    sigma_v: float
    reset_flag: int


def load_trajectory(path):
    """Read a trajectory CSV (time_s, range_m, velocity_mps); empty or 'nan'
    range/velocity cells mean the target is absent in that frame."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != \
                ["time_s", "range_m", "velocity_mps"]:
            raise ConfigError(
                f"{path}: expected header 'time_s,range_m,velocity_mps'")
        for line in reader:
            if not line:
                continue
            t = float(line[0])
            r = float(line[1]) if line[1].strip() not in ("", "nan") else math.nan
            v = float(line[2]) if line[2].strip() not in ("", "nan") else math.nan
            rows.append((t, r, v))
    if not rows:
        raise ConfigError(f"{path}: empty trajectory")
    return rows


def replay_track(cfg: ExperimentConfig, trajectory, remover: str | None = None,
                 noise_dbm: float | None = None,
                 detection_method: str = "kernel"):
    """Frame-by-frame replay: synthesize, remove clutter, detect, track.

    Per timestamp the target (when present) is injected at the trajectory's
    range/speed into the fixed clutter scene, the configured remover is
    applied, and the strongest above-threshold peak feeds the Kalman
    filter (predict every frame, update on detection).  Reset events
    de-initialize the track until the next detection.
    """
    remover = remover or cfg.removers[0]
    if remover not in REMOVERS:
        raise ConfigError(f"unknown remover {remover!r}")
    noise_power = cfg.noise_sweep_dbm[0] if noise_dbm is None else noise_dbm

    times = [t for t, _, _ in trajectory]
    dt = cfg.rf.frame_duration_s
    for a, b in zip(times, times[1:]):
        if not math.isclose(b - a, dt, rel_tol=1e-6, abs_tol=1e-12):
            raise ConfigError(
                f"trajectory timestamps must advance by the frame duration "
                f"{dt}; got step {b - a}")

    rng = track_rng(cfg.seed)
    clutter_scatterers, _ = scene.generate_scenario(cfg.scenario, cfg.rf, rng)
    noise = NoiseSpec(noise_power)
    k_db = cfg.scenario.rician_k_db
    snaps = acquire_snapshot_matrix(cfg.rf, clutter_scatterers, noise,
                                    cfg.snapshot_count, rng, fading_k_db=k_db)
    cal = clutter.calibrate(snaps, cfg.order, with_hash=False) \
        if remover == "crap" else None
    ecac = clutter.EcaCCanceller(snaps) if remover == "eca-c" else None
    ecas = clutter.EcaSCanceller(snaps) if remover == "eca-s" else None

    kf = tracker.KfParams.for_config(cfg.rf)
    p0 = tracker.default_initial_covariance(cfg.rf)
    state = None
    log = []
    for t, r, v in trajectory:
        scatterers = list(clutter_scatterers)
        if math.isfinite(r) and math.isfinite(v):
            scatterers.append(scene.Scatterer(
                range_m=r, velocity_mps=v,
                coeff=scene.draw_coefficient(cfg.scenario, cfg.rf, rng, r),
                role="target"))
        frame = scene.synthesize_csi(cfg.rf, scene.fluctuate(scatterers, k_db, rng),
                                     noise, rng.uniform(0.0, 2.0 * math.pi), rng,
                                     keep_meta=False)
        cleaned = _apply_remover(remover, frame, cal, ecac, ecas)
        pg = radar.periodogram(cleaned)
        eta = radar.cfar_threshold(pg, cfg.p_fa)
        det = radar.detect_strongest(pg, eta, cfg.rf, method=detection_method)

        r_meas = det.range_m if det else math.nan
        v_meas = det.velocity_mps if det else math.nan
        reset_flag = 0
        if state is None:
            if det is not None:
                state = tracker.init_track((r_meas, v_meas), p0, t0=t)
        else:
            state = tracker.predict(state, kf)
            if det is not None:
                state = tracker.update(state, (r_meas, v_meas), kf, now=t)
            do_reset, _reason = tracker.should_reset(state, t, kf)
            if do_reset:
                reset_flag = 1
        if state is not None:
            row = TrackLogRow(
                time_s=t, r_meas=r_meas, v_meas=v_meas,
                r_post=float(state.x[0]), v_post=float(state.x[1]),
                sigma_r=float(np.sqrt(state.p[0, 0])),
                sigma_v=float(np.sqrt(state.p[1, 1])),
                reset_flag=reset_flag)
        else:
            row = TrackLogRow(time_s=t, r_meas=r_meas, v_meas=v_meas,
                              r_post=math.nan, v_post=math.nan,
                              sigma_r=math.nan, sigma_v=math.nan,
                              reset_flag=reset_flag)
        log.append(row)
        if reset_flag:
            state = None
    return log


_TRACK_HEADER = ("schema_version,time_s,r_meas,v_meas,r_post,v_post,"
                 "sigma_r,sigma_v,reset_flag")


def write_track_csv(rows, path) -> None:
    need_header = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a") as fh:
        if need_header:
            fh.write(_TRACK_HEADER + "\n")
        for r in rows:
            fh.write(f"{TRACK_SCHEMA_VERSION},{r.time_s:.6f},{r.r_meas:.6f},"
                     f"{r.v_meas:.6f},{r.r_post:.6f},{r.v_post:.6f},"
                     f"{r.sigma_r:.6f},{r.sigma_v:.6f},{r.reset_flag}\n")
