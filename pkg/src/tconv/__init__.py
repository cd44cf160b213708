"""Temporally factorized 3D convolution (3TConv) on a small numpy autodiff core."""

from .affine import IDENTITY, AffineParams, DomainError, bilinear_sample, compose, make_grid, warp
from .conv import conv2d, conv3d, conv3d_direct
from .core import ContractError, EvaluationError, Tape, Tensor, gradcheck, load_tsr, save_tsr
from .filters import Filter3D, Filter3T, import_2d, materialize, materialize_bank, param_count
from .network import (DivergenceError, Model, ModelSpec, TrainConfig, build_model, predict_logits, tinyt_spec,
                      train, transfer_2d)

__all__ = [
    "IDENTITY", "AffineParams", "DomainError", "bilinear_sample", "compose", "make_grid", "warp",
    "conv2d", "conv3d", "conv3d_direct",
    "ContractError", "EvaluationError", "Tape", "Tensor", "gradcheck", "load_tsr", "save_tsr",
    "Filter3D", "Filter3T", "import_2d", "materialize", "materialize_bank", "param_count",
    "DivergenceError", "Model", "ModelSpec", "TrainConfig", "build_model", "predict_logits", "tinyt_spec",
    "train", "transfer_2d",
]
