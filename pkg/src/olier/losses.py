"""Penalty terms and the combined training objective.

Three regularizers are implemented:

* full-subspace orthogonality between the exponential-map images of the
  current and each previous task's perturbation (the multiplicative method's
  penalty),
* the low-rank-subspace orthogonality baseline on the B factors, and
* the L1 sparsity baseline on the dense perturbation B @ A.

Previous tasks' factors are frozen: no gradient reaches them through any
penalty here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .lie import LoraFactors, delta_from_factors, exp_taylor
from .tensor import (
    Tensor,
    add,
    detach,
    frobenius_norm,
    hadamard,
    l1_norm,
    matmul,
    scale,
    sum_entries,
    transpose,
)


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights of the two penalty terms in the total loss."""

    lambda_orth: float = 0.0
    lambda_sparse: float = 0.0

    def __post_init__(self):
        if self.lambda_orth < 0 or self.lambda_sparse < 0:
            raise ContractError(
                f"LossWeights: weights must be >= 0, got ({self.lambda_orth}, {self.lambda_sparse})"
            )


def _scalar_zero() -> Tensor:
    return Tensor(np.zeros(()))


def overlap_sum(current_exp: Tensor, previous_exps: list[Tensor]) -> Tensor:
    """sum_i || E_i @ E_current^T ||_F over precomputed exponential-map images."""
    total = None
    current_t = transpose(current_exp)
    for prev in previous_exps:
        if prev.shape != current_exp.shape:
            raise ShapeError(f"overlap_sum: shapes {prev.shape} and {current_exp.shape} differ")
        term = frobenius_norm(matmul(detach(prev), current_t))
        total = term if total is None else add(total, term)
    return total if total is not None else _scalar_zero()


def olier_orth_loss(current: LoraFactors, previous: list[LoraFactors], order: int) -> Tensor:
    """Full-subspace orthogonality penalty of the current task against all previous ones.

    For each previous task i this accumulates the Frobenius norm of
    exp_taylor(B_i A_i) @ exp_taylor(B_c A_c)^T.  Only the current factors
    receive gradients.
    """
    if not previous:
        return _scalar_zero()
    current_exp = exp_taylor(delta_from_factors(current), order)
    prev_exps = [exp_taylor(delta_from_factors(f.frozen()), order) for f in previous]
    return overlap_sum(current_exp, prev_exps)


def total_loss(task_loss: Tensor, orth: Tensor, sparse: Tensor, w: LossWeights) -> Tensor:
    """task_loss + lambda_orth * orth + lambda_sparse * sparse.

    Zero-weight terms are skipped entirely, so with both weights zero the task
    loss is returned unchanged.
    """
    out = task_loss
    if w.lambda_orth != 0.0:
        out = add(out, scale(orth, w.lambda_orth))
    if w.lambda_sparse != 0.0:
        out = add(out, scale(sparse, w.lambda_sparse))
    return out


def olora_orth_matrix(b_i: Tensor, b_t: Tensor) -> Tensor:
    """Overlap matrix B_i^T @ B_t between two tasks' column subspaces."""
    if b_i.data.ndim != 2 or b_t.data.ndim != 2:
        raise ShapeError(f"olora_orth_matrix: operands must be rank 2, got {b_i.shape} and {b_t.shape}")
    if b_i.shape[0] != b_t.shape[0]:
        raise ShapeError(f"olora_orth_matrix: row counts {b_i.shape[0]} and {b_t.shape[0]} differ")
    return matmul(transpose(b_i), b_t)


def olora_loss(current_b: Tensor, previous_bs: list[Tensor]) -> Tensor:
    """Low-rank-subspace orthogonality baseline: sum of squared overlap entries.

    Accumulates sum_{j,k} O[j,k]^2 with O = B_i^T B_current over every
    previous task i; previous factors are frozen.
    """
    total = None
    for b_i in previous_bs:
        overlap = olora_orth_matrix(detach(b_i), current_b)
        term = sum_entries(hadamard(overlap, overlap))
        total = term if total is None else add(total, term)
    return total if total is not None else _scalar_zero()


def nlora_sparsity(f: LoraFactors) -> Tensor:
    """Sparsity baseline: L1 norm of the dense perturbation B @ A (unweighted)."""
    return l1_norm(delta_from_factors(f))
