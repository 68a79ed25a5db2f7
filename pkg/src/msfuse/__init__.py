"""Multi-scale fusion networks for PET/CT head-and-neck tumour segmentation, in numpy."""

from .errors import (BadMagicError, ConfigError, CorruptFileError, DataError, DegenerateWarning,
                     DimensionError, GeometryError, MsfuseError, NumericError, TruncatedFileError,
                     UsageError, ValidationError, VolumeFormatError)
from .segnet import ModelConfig, SegNet, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, no_grad, precision
from .train import TrainConfig, cyclic_lr, train

__version__ = "0.1.0"
