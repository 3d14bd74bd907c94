"""Neuron-level mixed-precision quantization-aware training for MLPs."""

from .estimators import NMPQATClassifier, NMPQATRegressor
from .gates import ThresholdLadder
from .io import load_model, save_model
from .model import FrozenModel, MlpModel, QuantMode

__all__ = [
    "FrozenModel",
    "MlpModel",
    "NMPQATClassifier",
    "NMPQATRegressor",
    "QuantMode",
    "ThresholdLadder",
    "load_model",
    "save_model",
]
__version__ = "0.1.0"
