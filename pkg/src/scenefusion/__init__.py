"""Scene-adaptive fusion of RGB and a second imaging modality for object detection.

A small numpy autodiff engine trains two single-modality detectors; light
attention-based fusion modules are then trained per scene on frozen branches
and chosen at inference time by a scene classifier.
"""

from .checkpoint import CheckpointError
from .data import SplitSpec, generate_dataset, generate_sample, load_dataset
from .detector import DetectorConfig, FusedDetector, SingleDetector, detect_fused, detect_single
from .fusion import FusionBank, FusionModule, cbam_fuse, param_count
from .nn import grad_check
from .pipeline import Experiment, RunConfig
from .scene import SceneClassifier, TrainedSystem, classify_scene, detect_scene_adaptive, route, train_fusion

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "SplitSpec", "generate_dataset", "generate_sample", "load_dataset",
    "DetectorConfig", "FusedDetector", "SingleDetector", "detect_fused", "detect_single",
    "FusionBank", "FusionModule", "cbam_fuse", "param_count", "grad_check",
    "Experiment", "RunConfig", "SceneClassifier", "TrainedSystem", "classify_scene",
    "detect_scene_adaptive", "route", "train_fusion",
]
