"""Scalar fields built from randomly initialised attention heads.

Sample ensembles, evaluate fields, and measure their correlators with
jackknife errors; compare against closed-form kernels.
"""

from .attention import ContextSet, attention_weights, field_value, head_output, softmax_row
from .embedding import EmbeddingKind, EmbeddingSpec, FeatureParams, SpectralLaw, SpectralProfile, embed_point
from .ensembles import (
    AttentionMode,
    ConfigError,
    EnsembleConfig,
    HeadParams,
    ReadoutLaw,
    ReadoutParams,
    sample_head_params,
    sample_readout,
    verify_moments,
)
from .estimators import (
    CorrelatorEstimate,
    FourPointDecomposition,
    HTensorEstimates,
    assemble_four_point_decomposition,
    conditional_X,
    estimate_g2_conditional,
    estimate_g4_connected,
    estimate_gn,
    estimate_h_tensors,
    estimate_ib_covariances,
    four_point_analysis,
    jackknife_error,
)
from .experiments import (
    PowerLawFit,
    SweepParameter,
    SweepSpec,
    decoupled_alpha_control,
    fit_power_law,
    invariance_probe,
    sweep_heads,
    sweep_width,
)
from .kernels import (
    KernelSpec,
    PropagatorTarget,
    cosnet_kernel_closed_form,
    free_propagator_target,
    kernel_quadrature,
    match_profile_to_propagator,
)
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "AttentionMode",
    "ConfigError",
    "ContextSet",
    "CorrelatorEstimate",
    "EmbeddingKind",
    "EmbeddingSpec",
    "EnsembleConfig",
    "FeatureParams",
    "FourPointDecomposition",
    "HTensorEstimates",
    "HeadParams",
    "KernelSpec",
    "PowerLawFit",
    "PropagatorTarget",
    "ReadoutLaw",
    "ReadoutParams",
    "RngStream",
    "SpectralLaw",
    "SpectralProfile",
    "SweepParameter",
    "SweepSpec",
    "assemble_four_point_decomposition",
    "attention_weights",
    "conditional_X",
    "cosnet_kernel_closed_form",
    "decoupled_alpha_control",
    "embed_point",
    "estimate_g2_conditional",
    "estimate_g4_connected",
    "estimate_gn",
    "estimate_h_tensors",
    "estimate_ib_covariances",
    "field_value",
    "fit_power_law",
    "four_point_analysis",
    "free_propagator_target",
    "head_output",
    "invariance_probe",
    "jackknife_error",
    "kernel_quadrature",
    "match_profile_to_propagator",
    "sample_head_params",
    "sample_readout",
    "softmax_row",
    "sweep_heads",
    "sweep_width",
    "verify_moments",
]
