"""Low-rank tensor adapters for transformer attention weights, with the tooling to check them."""

from .adapters import (
    AdapterSpec,
    AdapterState,
    Method,
    ModelConfig,
    ParamCountReport,
    count_params,
    init_adapter,
    materialize_all,
    materialize_update,
    matched_rank_savings,
    random_adapter,
    savings_breakdown,
    trainable_factors,
)
from .errors import CheckpointError, ConfigError, NonFiniteError, ShapeError
from .tensor_core import CPModel, FitReport, cp_als, khatri_rao, reconstruct, unfold

__version__ = "0.1.0"

__all__ = [
    "AdapterSpec",
    "AdapterState",
    "CPModel",
    "CheckpointError",
    "ConfigError",
    "FitReport",
    "Method",
    "ModelConfig",
    "NonFiniteError",
    "ParamCountReport",
    "ShapeError",
    "count_params",
    "cp_als",
    "init_adapter",
    "khatri_rao",
    "matched_rank_savings",
    "materialize_all",
    "materialize_update",
    "random_adapter",
    "reconstruct",
    "savings_breakdown",
    "trainable_factors",
    "unfold",
]
