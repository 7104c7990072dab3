"""Spectrally decoupled mixture-of-experts: linear algebra, layer, metrics and toy harness."""

from .errors import SdMoeError
from .linalg_core import OrthonormalBasis, SvdFactors, projector, qr_orthonormal, spectral_norm, svd
from .moe_layer import MoeConfig, MoeParams, grad_check, init_params, layer_backward, layer_forward
from .sd_expert import DecoupledLinear, InitSpec, accumulate_updates, init_decoupled, refresh_basis, split_gradient
from .spectral_metrics import AnalysisConfig, principal_similarity
from .train_harness import SyntheticTaskSpec, TrainConfig, gen_batch, train

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig",
    "DecoupledLinear",
    "InitSpec",
    "MoeConfig",
    "MoeParams",
    "OrthonormalBasis",
    "SdMoeError",
    "SvdFactors",
    "SyntheticTaskSpec",
    "TrainConfig",
    "accumulate_updates",
    "gen_batch",
    "grad_check",
    "init_decoupled",
    "init_params",
    "layer_backward",
    "layer_forward",
    "principal_similarity",
    "projector",
    "qr_orthonormal",
    "refresh_basis",
    "spectral_norm",
    "split_gradient",
    "svd",
    "train",
]
