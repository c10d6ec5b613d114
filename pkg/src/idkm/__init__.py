"""Codebook weight quantization trained through a differentiable clustering
solve, with implicit, Jacobian-free, and unrolled gradient backends."""

from .errors import (
    AdjointDivergence,
    ConfigError,
    FormatError,
    IdkmError,
    NumericsError,
    ParamError,
    PartitionError,
    ShapeError,
)
from .gradients import (
    ClusterJacobians,
    GradBackend,
    implicit_dC_dW,
    jacobians_of_F,
    jfb_dC_dW,
    neumann_inverse,
    unrolled_dC_dW,
    vjp_dC_dW,
    vjp_through_trace,
)
from .nn import LayerSpec, Network, loss_and_grad, softmax_cross_entropy, squared_error
from .pq import (
    AttentionMatrix,
    Codebook,
    DistanceMatrix,
    WeightMatrix,
    attention,
    clustering_cost,
    distance_matrix,
    flatten_weights,
    hard_quantize,
    nearest_indices,
    partition_weights,
    soft_quantize,
    soft_quantize_vjp,
)
from .solver import (
    FixedPointResult,
    InitStrategy,
    fixed_point_map_F,
    init_codebook,
    solve_fixed_point,
)
from .training import (
    StepMetrics,
    TrainConfig,
    TrainState,
    bits_per_weight,
    evaluate,
    quantize_weights,
    quantized_train_step,
    solve_codebooks,
    train,
    train_float,
)

__version__ = "0.1.0"

__all__ = [
    "AdjointDivergence",
    "AttentionMatrix",
    "ClusterJacobians",
    "Codebook",
    "ConfigError",
    "DistanceMatrix",
    "FixedPointResult",
    "FormatError",
    "GradBackend",
    "IdkmError",
    "InitStrategy",
    "LayerSpec",
    "Network",
    "NumericsError",
    "ParamError",
    "PartitionError",
    "ShapeError",
    "StepMetrics",
    "TrainConfig",
    "TrainState",
    "WeightMatrix",
    "attention",
    "bits_per_weight",
    "clustering_cost",
    "distance_matrix",
    "evaluate",
    "fixed_point_map_F",
    "flatten_weights",
    "hard_quantize",
    "implicit_dC_dW",
    "init_codebook",
    "jacobians_of_F",
    "jfb_dC_dW",
    "loss_and_grad",
    "nearest_indices",
    "neumann_inverse",
    "partition_weights",
    "quantize_weights",
    "quantized_train_step",
    "soft_quantize",
    "soft_quantize_vjp",
    "softmax_cross_entropy",
    "solve_codebooks",
    "solve_fixed_point",
    "squared_error",
    "train",
    "train_float",
    "unrolled_dC_dW",
    "vjp_dC_dW",
    "vjp_through_trace",
]
