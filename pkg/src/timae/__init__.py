"""Masked autoencoding for time-series representation learning, on numpy."""

from .config import RunConfig
from .data import SyntheticSpec, TimeSeries, generate_synthetic, load_csv
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    InvariantViolation,
    NumericError,
    ParameterError,
    ParseError,
    ShapeError,
    TiMaeError,
    VersionError,
)
from .model import MaskSpec, ModelConfig, TiMaeModel, make_mask
from .tensor import Tensor, no_grad
from .training import FinetuneConfig, TrainConfig, finetune, pretrain

__version__ = "0.1.0"
