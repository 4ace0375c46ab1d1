"""Masked-image-modeling pre-training with pose-aligned distillation for 3D hand mesh recovery.

Import the submodules directly (``handmim.vit``, ``handmim.trainer`` ...) or use
the estimator wrappers re-exported here.
"""

from .config import RunConfig, load_config
from .errors import HandMIMError
from .estimators import HandMeshRegressor, HandMIMPretrainer
from .hand_model import HandModelData, ManoParams, synhand
from .metrics import MetricReport

__version__ = "0.1.0"

__all__ = [
    "HandMIMError",
    "HandMIMPretrainer",
    "HandMeshRegressor",
    "HandModelData",
    "ManoParams",
    "MetricReport",
    "RunConfig",
    "load_config",
    "synhand",
]
