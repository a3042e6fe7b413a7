"""Invertible-feature perceptual losses for super-resolution guidance."""
from .config import AppConfig, CscWeights, DfeConfig, LipConfig, MghfConfig, MonceConfig, PruningConfig, TrainConfig
from .dfe import DfeModel, dfe_extract, dfe_vjp, init_model, load_weights, save_weights
from .objective import LossReport, mghf_c, mghf_n, score_n

__all__ = [
    "AppConfig", "CscWeights", "DfeConfig", "LipConfig", "MghfConfig", "MonceConfig", "PruningConfig",
    "TrainConfig", "DfeModel", "dfe_extract", "dfe_vjp", "init_model", "load_weights", "save_weights",
    "LossReport", "mghf_c", "mghf_n", "score_n",
]
