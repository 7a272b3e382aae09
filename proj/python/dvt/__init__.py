"""Early-exit vision transformer cascade: training, adaptive inference, and
budgeted threshold solving on top of the C++ core."""

from dvt._core import (
    Cascade,
    CascadeConfig,
    DataError,
    ExitTrace,
    NumericError,
    ShapeError,
    UsageError,
    __version__,
    attention_grid_upsample,
    bilinear_upsample_grid,
    config_from_json,
    cross_entropy,
    cumulative_flops,
    entropy_policy,
    evaluate_policy,
    flops_estimate,
    gelu,
    layer_norm,
    load,
    load_dataset,
    load_trace,
    save_trace,
    softmax,
    solve_ga,
    solve_grid,
)

__all__ = [
    "Cascade",
    "CascadeConfig",
    "DataError",
    "ExitTrace",
    "NumericError",
    "ShapeError",
    "UsageError",
    "__version__",
    "attention_grid_upsample",
    "bilinear_upsample_grid",
    "config_from_json",
    "cross_entropy",
    "cumulative_flops",
    "entropy_policy",
    "evaluate_policy",
    "flops_estimate",
    "gelu",
    "layer_norm",
    "load",
    "load_dataset",
    "load_trace",
    "save_trace",
    "softmax",
    "solve_ga",
    "solve_grid",
]
