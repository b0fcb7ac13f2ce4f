"""Memory-augmented self-supervised autoencoder for multivariate time-series anomaly detection."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATIONS, ConfigError, RunConfig
from .detect import Threshold, calibrate, detect, evaluate, predict
from .model import AmslModel, fit

__all__ = ["ABLATIONS", "AmslModel", "ConfigError", "RunConfig", "Threshold", "calibrate", "detect",
           "evaluate", "fit", "load_checkpoint", "predict", "save_checkpoint"]
__version__ = "0.1.0"
