"""Non-local U-Net for volumetric segmentation, built on a small numpy autograd engine."""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    NLUNetError,
    NumericError,
    ResourceError,
    ShapeError,
    UndefinedMetricError,
    VolumeIOError,
)
from .metrics import dice_ratio, evaluate, mhd_3d, mhd_directional
from .network import Network, NetworkConfig, build_network, count_parameters, load_checkpoint, make_ablation, save_checkpoint
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"
