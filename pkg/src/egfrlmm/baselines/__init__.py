"""Chart-free comparison models trained on the same windows."""

from egfrlmm.baselines.cnn import ArchConfig, CNNModel, OptimizerConfig, cnn_predict, cnn_train
from egfrlmm.baselines.features import FEATURE_NAMES, FeatureEncoder, sequence_input, sequence_length, targets
from egfrlmm.baselines.forest import ForestParams, RandomForest, rf_predict, rf_train

__all__ = [
    "ArchConfig",
    "CNNModel",
    "FEATURE_NAMES",
    "FeatureEncoder",
    "ForestParams",
    "OptimizerConfig",
    "RandomForest",
    "cnn_predict",
    "cnn_train",
    "rf_predict",
    "rf_train",
    "sequence_input",
    "sequence_length",
    "targets",
]
