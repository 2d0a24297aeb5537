"""Parameter-efficient MoE-conformer toolkit.

A thin wrapper around the C++ core: tensor/autodiff engine, grouped
cross-layer-shared conformer encoder with top-1 sparsely-gated expert FFNs,
training losses, beam-search decoding, and the synthetic-task harness.
"""

from smc._core import (
    NonFiniteError,
    ShapeError,
    UsageError,
    count_params,
    count_params_file,
    edit_distance,
    evaluate,
    l2_curve,
    load_balance_loss,
    lr_schedule,
    softmax,
    swish,
    synth_data,
    train,
)

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "UsageError",
    "count_params",
    "count_params_file",
    "edit_distance",
    "evaluate",
    "l2_curve",
    "load_balance_loss",
    "lr_schedule",
    "softmax",
    "swish",
    "synth_data",
    "train",
]

__version__ = "0.1.0"
