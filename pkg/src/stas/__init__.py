"""Station precipitation bias correction with adaptive spatial scale and temporal lag selection."""

from .config import ConfigError, GeneratorConfig, NumericalError, RunConfig, TrainConfig, desk_train_config
from .data import SampleSet, generate_dataset, load_dataset, save_dataset
from .metrics import evaluate, threat_score
from .training import STAS, fit, load_checkpoint, predict, save_checkpoint

__all__ = [
    "ConfigError", "GeneratorConfig", "NumericalError", "RunConfig", "TrainConfig",
    "desk_train_config", "SampleSet", "generate_dataset", "load_dataset", "save_dataset",
    "evaluate", "threat_score", "STAS", "fit", "load_checkpoint", "predict", "save_checkpoint",
]

__version__ = "0.1.0"
