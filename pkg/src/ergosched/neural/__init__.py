from .autodiff import Tensor, parameter
from .layers import (
    FROZEN_ZERO,
    SAMPLED,
    Linear,
    NoisyLinear,
    attention,
    positional_encoding,
    positional_encoding_table,
)
from .qnet import (
    NetworkConfig,
    ObsBatch,
    QNetwork,
    config_hash,
    forward_q,
    grad_check,
    load_params,
    restore_into,
    save_params,
    stack_observations,
    zero_grads,
)

__all__ = [
    "Tensor",
    "parameter",
    "FROZEN_ZERO",
    "SAMPLED",
    "Linear",
    "NoisyLinear",
    "attention",
    "positional_encoding",
    "positional_encoding_table",
    "NetworkConfig",
    "ObsBatch",
    "QNetwork",
    "config_hash",
    "forward_q",
    "grad_check",
    "load_params",
    "restore_into",
    "save_params",
    "stack_observations",
    "zero_grads",
]
