"""Tensor-structured Bayesian channel estimation and prediction."""

from .channel_model import (
    SPEED_OF_LIGHT,
    PathParams,
    Scene,
    SystemConfig,
    assemble_sft,
    delay_offset,
    ground_truth_prediction,
    load_scene,
    noise_var_for_snr,
    observe,
    sample_scene,
    save_scene,
)
from .factor_matrices import (
    FactorSet,
    GridSpec,
    Perturbations,
    build_factors,
    doppler_pred_matrix,
    make_grids,
    prediction_origin,
    steer_beam,
    steer_delay,
    steer_doppler,
    steer_doppler_pred,
)
from .tensor_core import (
    EPS_DIV,
    RealTensor,
    Tensor,
    abs2,
    contract_except,
    fro_norm,
    inner,
    l1_norm,
    load_tensor,
    mode_matricize,
    mode_order,
    mode_product,
    mode_unmatricize,
    multi_mode_product,
    save_tensor,
)

__all__ = [
    "EPS_DIV",
    "SPEED_OF_LIGHT",
    "FactorSet",
    "GridSpec",
    "PathParams",
    "Perturbations",
    "RealTensor",
    "Scene",
    "SystemConfig",
    "Tensor",
    "abs2",
    "assemble_sft",
    "build_factors",
    "contract_except",
    "delay_offset",
    "doppler_pred_matrix",
    "fro_norm",
    "ground_truth_prediction",
    "inner",
    "l1_norm",
    "load_scene",
    "load_tensor",
    "make_grids",
    "mode_matricize",
    "mode_order",
    "mode_product",
    "mode_unmatricize",
    "multi_mode_product",
    "noise_var_for_snr",
    "observe",
    "prediction_origin",
    "sample_scene",
    "save_scene",
    "save_tensor",
    "steer_beam",
    "steer_delay",
    "steer_doppler",
    "steer_doppler_pred",
]

__version__ = "0.1.0"
