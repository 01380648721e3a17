"""Gaze-guided class activation mapping on a small numpy autodiff core."""

from .cam_head import CamHead, CamOutput, StandardHead
from .dataset import CLASS_NAMES, DataError, Dataset, load_split
from .evaluation import anova_oneway, auc_multiclass, interpretability, interpretability_rate, precision_recall
from .gaze_heatmap import GazeTrace, VisualHeatMap, make_heatmap
from .losses import UncertaintyWeights, combined_loss, cross_entropy, selective_mse
from .network import Classifier, NetworkConfig, build_classifier, class_maps, parameter_census, predict
from .numerics import NumericalError, Tensor
from .synthetic_data import SceneSpec, generate_corpus, generate_sample
from .trainer import TrainConfig, TrainingError, fit, preset

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "CamHead",
    "CamOutput",
    "Classifier",
    "DataError",
    "Dataset",
    "GazeTrace",
    "NetworkConfig",
    "NumericalError",
    "SceneSpec",
    "StandardHead",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "UncertaintyWeights",
    "VisualHeatMap",
    "anova_oneway",
    "auc_multiclass",
    "build_classifier",
    "class_maps",
    "combined_loss",
    "cross_entropy",
    "fit",
    "generate_corpus",
    "generate_sample",
    "interpretability",
    "interpretability_rate",
    "load_split",
    "make_heatmap",
    "parameter_census",
    "precision_recall",
    "predict",
    "preset",
    "selective_mse",
]
