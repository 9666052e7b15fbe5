"""Multiplicative low-rank adapters on the Hadamard group, with
orthogonality-constrained continual-learning baselines and Fisher diagnostics."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DivergenceError,
    GroupMembershipError,
    NonFiniteError,
    ShapeError,
    StateError,
)
from .tensor import (
    GradientTape,
    Tensor,
    add,
    add_bias,
    backward,
    cross_entropy,
    detach,
    finite_diff_grad,
    frobenius_norm,
    hadamard,
    l1_norm,
    matmul,
    ones,
    relative_error,
    scale,
    sub,
    sum_entries,
    tanh,
    transpose,
    zeros,
)
from .lie import (
    MEMBERSHIP_EPS,
    GroupElement,
    LoraFactors,
    apply_update,
    compose_task_updates,
    delta_from_factors,
    exp_taylor,
    group_check,
    group_identity,
    group_inverse,
    group_mul,
    recover_delta,
)
from .losses import (
    LossWeights,
    nlora_sparsity,
    olier_orth_loss,
    olora_loss,
    olora_orth_matrix,
    total_loss,
)
from .model import (
    AdaptedLinear,
    ClassifierModel,
    begin_task,
    build_classifier,
    finish_task,
    forward,
    trainable_parameters,
)
from .datasets import Task, TaskStream, make_stream, stream_orders
from .training import (
    METHODS,
    AccuracyMatrix,
    StreamResult,
    TrainingConfig,
    TrainingLog,
    average_accuracy,
    evaluate,
    run_stream,
    train_task,
)
from .fisher import FisherReport, cross_task_energy, fisher_diag, fisher_energy
