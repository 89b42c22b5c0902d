"""Command-line front end.

Subcommands mirror the processing stages: ``acquire`` records clutter-only
snapshots, ``calibrate`` turns them into a clutter-removal calibration,
``sense`` runs removal + detection on one stored frame, ``simulate`` runs
the Monte Carlo noise sweep, and ``track`` replays a trajectory through
the full chain with the Kalman filter.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import clutter, harness, radar, scene
from .harness import ConfigError
from .numerics import NumericsError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ofdmsense",
        description="OFDM sensing simulator: clutter removal, detection, tracking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("acquire", help="record clutter-only snapshot frames")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--noise-dbm", type=float, default=None,
                   help="acquisition noise power (default: first sweep point)")

    p = sub.add_parser("calibrate", help="build a clutter calibration from snapshots")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order", default="auto",
                   help="explicit clutter order L, or 'auto'")

    p = sub.add_parser("sense", help="remove clutter and detect on one frame")
    p.add_argument("--config", required=True,
                   help="experiment config (radio parameters and p_fa)")
    p.add_argument("--cal", default=None,
                   help="calibration file (crap) or snapshot file (eca-c/eca-s)")
    p.add_argument("--in", dest="infile", required=True,
                   help="frame file (snapshot format with K = 1)")
    p.add_argument("--remover", choices=harness.REMOVERS, default="crap")
    p.add_argument("--dump-pgram", default=None,
                   help="write the periodogram and a peak CSV next to it")

    p = sub.add_parser("simulate", help="run the Monte Carlo noise sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("track", help="replay a trajectory through the tracker")
    p.add_argument("--config", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--remover", choices=harness.REMOVERS, default=None)

    return parser


def _cmd_acquire(args) -> int:
    cfg = harness.load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    noise_dbm = args.noise_dbm if args.noise_dbm is not None \
        else cfg.noise_sweep_dbm[0]
    rng = harness.acquisition_rng(seed)
    clutter_scatterers, _ = scene.generate_scenario(cfg.scenario, cfg.rf, rng)
    snaps = harness.acquire_snapshot_matrix(
        cfg.rf, clutter_scatterers, scene.NoiseSpec(noise_dbm),
        cfg.snapshot_count, rng, fading_k_db=cfg.scenario.rician_k_db)
    clutter.save_snapshots(snaps, args.out)
    print(f"wrote {snaps.k} snapshots ({snaps.n_subcarriers}x{snaps.n_symbols}) "
          f"to {args.out}")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    snaps = clutter.load_snapshots(args.infile)
    order = "auto" if args.order == "auto" else int(args.order)
    cal = clutter.calibrate(snaps, order)
    clutter.save_calibration(cal, args.out)
    print(f"calibrated order L={cal.order} from K={snaps.k} snapshots; "
          f"wrote {args.out}")
    return EXIT_OK


def _load_frame(path, rf) -> scene.CsiFrame:
    snaps = clutter.load_snapshots(path)
    if snaps.k != 1:
        raise ConfigError(f"{path}: expected a single-frame file, found K={snaps.k}")
    if (snaps.n_subcarriers, snaps.n_symbols) != (rf.n_subcarriers, rf.n_symbols):
        raise ConfigError(f"{path}: frame dims do not match the config")
    h = snaps.c[0].reshape((snaps.n_subcarriers, snaps.n_symbols), order="F")
    return scene.CsiFrame(config=rf, h=h)


def _cmd_sense(args) -> int:
    cfg = harness.load_config(args.config)
    frame = _load_frame(args.infile, cfg.rf)

    remover = args.remover
    cal = ecac = ecas = None
    if remover == "crap":
        if args.cal is None:
            raise ConfigError("--cal is required for the crap remover")
        cal = clutter.load_calibration(args.cal)
    elif remover in ("eca-c", "eca-s"):
        if args.cal is None:
            raise ConfigError(f"--cal (a snapshot file) is required for {remover}")
        snaps = clutter.load_snapshots(args.cal)
        if remover == "eca-c":
            ecac = clutter.EcaCCanceller(snaps)
        else:
            ecas = clutter.EcaSCanceller(snaps)

    cleaned = harness._apply_remover(remover, frame, cal, ecac, ecas)
    pg = radar.periodogram(cleaned)
    eta = radar.cfar_threshold(pg, cfg.p_fa)
    det = radar.detect_strongest(pg, eta, cfg.rf)
    if args.dump_pgram:
        radar.save_periodogram(pg, args.dump_pgram)
        radar.write_peak_csv(det, args.dump_pgram + ".peaks.csv")
    print(radar.PEAK_CSV_HEADER)
    print(radar.detection_csv_row(det))
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cfg = harness.load_config(args.config)
    result = harness.sweep(cfg, progress=lambda msg: print(msg, file=sys.stderr))
    harness.write_results_csv(result.rows, args.out)
    print(f"wrote {len(result.rows)} result rows to {args.out}")
    for row in result.rows:
        print(f"  noise {row.noise_dbm:+8.1f} dBm  {row.remover:6s}  "
              f"P_MD={row.p_md:.3f}  RMSE(r)={row.rmse_range_m:.3f} m  "
              f"RMSE(v)={row.rmse_velocity_mps:.3f} m/s")
    return EXIT_OK


def _cmd_track(args) -> int:
    cfg = harness.load_config(args.config)
    trajectory = harness.load_trajectory(args.trajectory)
    log = harness.replay_track(cfg, trajectory, remover=args.remover)
    harness.write_track_csv(log, args.out)
    detections = sum(1 for row in log if math.isfinite(row.r_meas))
    resets = sum(row.reset_flag for row in log)
    print(f"tracked {len(log)} frames ({detections} detections, "
          f"{resets} resets); wrote {args.out}")
    return EXIT_OK


_COMMANDS = {
    "acquire": _cmd_acquire,
    "calibrate": _cmd_calibrate,
    "sense": _cmd_sense,
    "simulate": _cmd_simulate,
    "track": _cmd_track,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericsError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
