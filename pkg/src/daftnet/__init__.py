"""Image + tabular fusion networks with dynamic affine feature map transforms.

A small numpy autodiff engine, 3D residual backbones, DAFT and the competing
fusion heads, Cox / cross-entropy losses, survival metrics, a synthetic data
generator and a command line harness.
"""
from .data import SyntheticConfig, TabularEncoder, generate_synthetic, load_dataset, save_dataset, stratified_kfold
from .estimators import FusionClassifier, FusionSurvivalModel
from .fusion import DaftConfig, ModelConfig, build_model, forward_with_override, modulation_stats
from .metrics import SurvivalLabel, balanced_accuracy, cox_ph_loss, cross_entropy, km_censoring, uno_cindex
from .tensor import Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "DaftConfig", "FusionClassifier", "FusionSurvivalModel", "ModelConfig", "SurvivalLabel", "SyntheticConfig",
    "TabularEncoder", "Tensor", "balanced_accuracy", "build_model", "cox_ph_loss", "cross_entropy",
    "forward_with_override", "generate_synthetic", "grad_check", "km_censoring", "load_dataset",
    "modulation_stats", "save_dataset", "stratified_kfold", "uno_cindex",
]
