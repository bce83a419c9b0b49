"""Dynamic-fusion multimodal classifier for speech-based risk screening.

Three branches (raw waveform, time-frequency features, transcript text) each
produce a fixed-size embedding; learnable scalar weights scale them before a
single softmax classifier.  Everything runs on a small float64 autodiff
engine built on numpy.
"""

from .errors import (CheckpointError, ConfigError, ContractError, DataError, DynFusionError,
                     InvalidInputError, ManifestError, NumericError, ShapeError, StageOrderError,
                     UnsupportedFormatError)
from .fusion import Batch, FusionModel, ModelConfig, build_model
from .tensor import Parameter, Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "Batch", "CheckpointError", "ConfigError", "ContractError", "DataError", "DynFusionError",
    "FusionModel", "InvalidInputError", "ManifestError", "ModelConfig", "NumericError", "Parameter",
    "ShapeError", "StageOrderError", "Tensor", "UnsupportedFormatError", "build_model", "grad_check",
    "no_grad",
]
