from .config import ConfigError, TrainConfig, load_config, parse_config
from .metrics import MetricsReport, accuracy, auc_prc, auc_roc, bootstrap
from .model import CadModel
from .train import TrainingDiverged, evaluate, load_checkpoint, train

__all__ = [
    "CadModel",
    "ConfigError",
    "MetricsReport",
    "TrainConfig",
    "TrainingDiverged",
    "accuracy",
    "auc_prc",
    "auc_roc",
    "bootstrap",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "parse_config",
    "train",
]
