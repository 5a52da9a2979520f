"""Two-stage skeleton-based fall classification: a binary fall detector gates
a five-way fall-type classifier."""

from .cascade import CascadeModel, TrainConfig, run_full_pipeline, run_pipeline
from .data import FALL_CLASSES, SynthConfig, synthesize_dataset
from .net import build_network, load_model, save_model

__all__ = [
    "CascadeModel",
    "TrainConfig",
    "run_full_pipeline",
    "run_pipeline",
    "FALL_CLASSES",
    "SynthConfig",
    "synthesize_dataset",
    "build_network",
    "load_model",
    "save_model",
]

__version__ = "0.1.0"
