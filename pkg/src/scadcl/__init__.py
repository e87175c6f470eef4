"""Multi-label continual learning with attention distillation through learned masks."""
from .benchmark import StreamConfig, TaskStream, build_stream, export_manifest, load_manifest
from .estimator import ContinualLearner
from .methods import METHOD_KINDS, MethodSpec, total_loss
from .metrics import ResultMatrix, adjusted_forgetting, final_average_pwjs, predict_labels, pwjs
from .runner import ExperimentConfig, config_from_dict, load_config, report, run_experiment
from .vit import ViTConfig, VisionTransformer

__version__ = "0.1.0"

__all__ = [
    "ContinualLearner", "ExperimentConfig", "METHOD_KINDS", "MethodSpec", "ResultMatrix", "StreamConfig",
    "TaskStream", "ViTConfig", "VisionTransformer", "adjusted_forgetting", "build_stream", "config_from_dict",
    "export_manifest", "final_average_pwjs", "load_config", "load_manifest", "predict_labels", "pwjs", "report",
    "run_experiment", "total_loss",
]
