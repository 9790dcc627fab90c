"""Gradient-boosted decision trees with exact greedy splits."""
from .booster import (
    BoostedModel,
    Leaf,
    Split,
    TrainConfig,
    Tree,
    config_dict,
    feature_importance,
    predict,
    select_top_k_features,
    train,
)
from .kernels import BACKEND
from .serialize import dumps, loads, load_model, save_model

__all__ = [
    "BACKEND",
    "BoostedModel",
    "Leaf",
    "Split",
    "TrainConfig",
    "Tree",
    "config_dict",
    "dumps",
    "feature_importance",
    "load_model",
    "loads",
    "predict",
    "save_model",
    "select_top_k_features",
    "train",
]
