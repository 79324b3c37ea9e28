"""Dual-channel structural covariance network fusion pipeline for sMRI classification."""
from .evaluation import TrainConfig, compute_metrics, make_fold_plan, run_cv
from .features import FeatureTable, extract_features
from .model import DuScnFusionNet, ModelConfig
from .nn.kernels import BACKEND
from .scn import build_scn_batch, build_scn_tensor
from .synth import CohortSpec, generate_cohort

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CohortSpec",
    "DuScnFusionNet",
    "FeatureTable",
    "ModelConfig",
    "TrainConfig",
    "build_scn_batch",
    "build_scn_tensor",
    "compute_metrics",
    "extract_features",
    "generate_cohort",
    "make_fold_plan",
    "run_cv",
]
