"""OFDM integrated-sensing simulator and clutter-removal library."""

from .scene import (
    SPEED_OF_LIGHT,
    CsiFrame,
    NoiseSpec,
    RfConfig,
    ScenarioParams,
    Scatterer,
)
from .clutter import ClutterCalibration, ClutterSnapshots
from .radar import Detection, Periodogram
from .tracker import KfParams, TrackState
from .harness import ExperimentConfig, TrialRecord

__version__ = "0.1.0"

__all__ = [
    "SPEED_OF_LIGHT",
    "CsiFrame",
    "NoiseSpec",
    "RfConfig",
    "ScenarioParams",
    "Scatterer",
    "ClutterCalibration",
    "ClutterSnapshots",
    "Detection",
    "Periodogram",
    "KfParams",
    "TrackState",
    "ExperimentConfig",
    "TrialRecord",
    "__version__",
]
