"""Self-supervised 3D scene flow with online superpoint clustering.

The pipeline: set-convolution feature encoding, entropic-transport initial flow,
iterated flow-guided superpoint generation, superpoint-guided GRU refinement,
and Chamfer/smoothness/consistency self-supervision — all on a tape-based
numpy autodiff core so every gradient is checkable against finite
differences.
"""

from .autodiff import Tensor
from .errors import DataError, NumericError
from .geometry import backward_interpolate, farthest_point_sample, knn, nearest_match
from .losses import LossReport, chamfer_loss, consistency_loss, smoothness_loss, total_loss
from .metrics import MetricsReport, evaluate
from .model import FlowModel, build_model
from .optim import OptimConfig, ParameterStore, adam_step, backward, lr_at_epoch
from .refinement import PipelineConfig, run_pipeline
from .synthetic import ScenePair, SyntheticConfig, generate_scene
from .training import estimate_flow, scene_loss, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "DataError",
    "NumericError",
    "backward_interpolate",
    "farthest_point_sample",
    "knn",
    "nearest_match",
    "LossReport",
    "chamfer_loss",
    "consistency_loss",
    "smoothness_loss",
    "total_loss",
    "MetricsReport",
    "evaluate",
    "FlowModel",
    "build_model",
    "OptimConfig",
    "ParameterStore",
    "adam_step",
    "backward",
    "lr_at_epoch",
    "PipelineConfig",
    "run_pipeline",
    "ScenePair",
    "SyntheticConfig",
    "generate_scene",
    "estimate_flow",
    "scene_loss",
    "train",
    "__version__",
]
