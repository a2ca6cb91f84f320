"""Progressive image-resizing training regimes on a small numpy autodiff framework."""

from .config import ExperimentConfig, parse_config
from .data import Dataset, load_image_folder, split
from .metrics import compare_regimes, standardized_accuracy
from .model import ResNetConfig, build_resnet
from .records import RunRecord
from .regimes import PipelineConfig, RegimeConfig, run_regime
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ExperimentConfig",
    "PipelineConfig",
    "RegimeConfig",
    "ResNetConfig",
    "RunRecord",
    "Tensor",
    "build_resnet",
    "compare_regimes",
    "load_image_folder",
    "no_grad",
    "parse_config",
    "run_regime",
    "split",
    "standardized_accuracy",
]
