"""Hyperspectral / multispectral image fusion with a double U-Net."""

from .checkpoint import Checkpoint
from .datagen import (DatasetManifest, ImageCube, SampleTriple, make_triple, read_cube,
                      synth_scene, upsample_lowres, write_cube)
from .errors import (ConfigError, ContractError, DimensionError, FormatError, FuselabError,
                     MetricUndefinedError, NonFiniteError, ShapeError, TrainingAborted)
from .metrics import FullResReport, ReducedResReport, qnr_suite, reduced_metrics
from .tensor import Tensor, no_grad
from .training import TrainConfig, fit
from .u2net import ModelConfig, init_params, u2net_forward

__version__ = "0.1.0"
