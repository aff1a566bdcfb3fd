"""Low-bit shift networks with sign-sparse-shift re-parameterization, trained and deployed without multiplies."""

from .config import ExperimentConfig, preset
from .models import ModelSpec, build_model
from .quantizers import QuantSpec, S3Weight, SteConfig
from .shift_inference import PackedModel, PackedShiftTensor, count_ops, export_model, pack, shift_forward, unpack
from .training import ablate, train

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "ModelSpec",
    "PackedModel",
    "PackedShiftTensor",
    "QuantSpec",
    "S3Weight",
    "SteConfig",
    "ablate",
    "build_model",
    "count_ops",
    "export_model",
    "pack",
    "preset",
    "shift_forward",
    "train",
    "unpack",
]
