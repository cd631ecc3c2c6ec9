"""Koopman-mode signatures of false-data-injection attacks in grid sensor streams."""

__version__ = "0.1.0"

from .attack import AttackInjector, AttackSpec, attack_variables, inject
from .detector import (DeltaScoreSeries, KMDeltaScorer, WindowConfig, delta_scores,
                       divergence, error_sequence, normalize_two_step, run_stream)
from .frames import Channel, TimeSeriesFrame, ingest_csv
from .gridsim import GridEvent, GridSimulator, NetworkModel, build_network, simulate
from .koopman import KoopmanDMD

__all__ = [
    "AttackInjector", "AttackSpec", "Channel", "DeltaScoreSeries", "GridEvent",
    "GridSimulator", "KMDeltaScorer", "KoopmanDMD", "NetworkModel", "TimeSeriesFrame",
    "WindowConfig", "attack_variables", "build_network", "delta_scores", "divergence",
    "error_sequence", "ingest_csv", "inject", "normalize_two_step", "run_stream", "simulate",
]
