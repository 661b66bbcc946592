"""Si-Blurry online class-incremental benchmark and the MVP learner."""

from .datasets import DatasetIndex, load_dataset, make_synthetic
from .engine import RunRecord, TrainConfig, run_online
from .scenario import ScenarioConfig, StreamManifest, build_stream, iterate_stream

__version__ = "0.1.0"

__all__ = [
    "DatasetIndex",
    "RunRecord",
    "ScenarioConfig",
    "StreamManifest",
    "TrainConfig",
    "build_stream",
    "iterate_stream",
    "load_dataset",
    "make_synthetic",
    "run_online",
]
