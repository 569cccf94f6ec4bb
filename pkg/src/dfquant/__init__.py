"""Data-free quantization toolkit.

Synthesizes training images from a frozen full-precision teacher with a
conditional generator guided by batch-norm statistics matching,
classification loss, perturbation-consistency (robustness) hinges, and
maximally spread soft labels, then fine-tunes a low-bit fake-quantized
copy of the teacher by distillation on the synthesized images only.
"""

__version__ = "0.1.0"

from .config import TrainConfig, parse_config
from .generator import ConditionalGenerator, sample_latent
from .guard import GuardViolation, guard
from .quant import QuantConfig, build_quantized
from .robustness import PerturbSuite, RobustnessThresholds, calibrate_thresholds
from .teachers import TeacherSpec, build_teacher, load_teacher, train_teacher
from .trainer import TrainingDiverged, load_run, train

__all__ = [
    "ConditionalGenerator", "GuardViolation", "PerturbSuite", "QuantConfig",
    "RobustnessThresholds", "TeacherSpec", "TrainConfig", "TrainingDiverged",
    "build_quantized", "build_teacher", "calibrate_thresholds", "guard",
    "load_run", "load_teacher", "parse_config", "sample_latent", "train",
    "train_teacher", "__version__",
]
