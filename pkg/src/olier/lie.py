"""The Hadamard group of all-nonzero tensors, its exponential map, and low-rank updates.

Same-shape tensors whose entries are all nonzero form an Abelian group under
elementwise multiplication, with the all-ones tensor as identity and the
elementwise reciprocal as inverse.  Weight updates live in the tangent space
as unconstrained perturbation tensors and are carried back onto the group by
the elementwise exponential, approximated here by its order-n Taylor
polynomial.  Perturbations are parameterized by a thin low-rank pair so a
frozen weight matrix is adapted as ``W * exp_taylor(B @ A, order)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GroupMembershipError, ShapeError
from .tensor import Tensor, _record, detach, hadamard, matmul, scale

logger = logging.getLogger(__name__)

# Entries with magnitude at or below this threshold are treated as zero for
# group membership.  Merged weights that land inside the threshold are clamped
# rather than rejected, so training survives the measure-zero event.
MEMBERSHIP_EPS = 1e-12


@dataclass(frozen=True)
class GroupElement:
    """A member of the Hadamard group: a tensor with every entry nonzero.

    Construct through :func:`group_check`, which validates membership.
    """

    value: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def group_check(w: Tensor, eps: float = MEMBERSHIP_EPS) -> GroupElement:
    """Validate group membership: every entry must have magnitude above eps."""
    if eps <= 0:
        raise ContractError("group_check: eps must be positive")
    magnitudes = np.abs(w.data)
    worst = np.unravel_index(np.argmin(magnitudes), magnitudes.shape) if w.data.size else ()
    if w.data.size == 0 or magnitudes[worst] <= eps:
        raise GroupMembershipError(worst, w.data[worst] if w.data.size else 0.0, eps)
    return GroupElement(w)


def group_identity(shape) -> GroupElement:
    """The all-ones tensor of the given shape."""
    return GroupElement(Tensor(np.ones(tuple(shape))))


def group_mul(w1: GroupElement, w2: GroupElement) -> GroupElement:
    """Elementwise product of two members; the result is re-validated."""
    if w1.shape != w2.shape:
        raise ShapeError(f"group_mul: shapes {w1.shape} and {w2.shape} differ")
    return group_check(hadamard(w1.value, w2.value))


def group_inverse(w: GroupElement) -> GroupElement:
    """Elementwise reciprocal; membership guarantees it exists."""
    return GroupElement(Tensor(1.0 / w.value.data))


def recover_delta(w_old: GroupElement, w_new: GroupElement) -> Tensor:
    """The group increment taking w_old to w_new: reciprocal(w_old) * w_new."""
    if w_old.shape != w_new.shape:
        raise ShapeError(f"recover_delta: shapes {w_old.shape} and {w_new.shape} differ")
    return hadamard(group_inverse(w_old).value, w_new.value)


def exp_taylor(delta: Tensor, order: int) -> Tensor:
    """Order-n Taylor polynomial of the elementwise exponential.

    Returns sum_{k=0..n} delta^(elementwise k) / k!, computed through
    differentiable ops so gradients flow back into delta.
    """
    order = int(order)
    if order < 1:
        raise ContractError(f"exp_taylor: order must be >= 1, got {order}")
    acc = Tensor(np.ones(delta.shape))
    term = acc
    for k in range(1, order + 1):
        term = hadamard(term, delta)
        acc = acc + scale(term, 1.0 / math.factorial(k))
    return acc


@dataclass
class LoraFactors:
    """A low-rank perturbation pair: delta = B @ A with B (out x r) and A (r x in).

    The rank must satisfy r <= min(out, in); the product is derived on demand
    and never stored.
    """

    B: Tensor
    A: Tensor

    def __post_init__(self):
        if self.B.data.ndim != 2 or self.A.data.ndim != 2:
            raise ShapeError(f"LoraFactors: B and A must be rank 2, got {self.B.shape} and {self.A.shape}")
        out, r = self.B.shape
        r2, in_ = self.A.shape
        if r != r2:
            raise ShapeError(f"LoraFactors: rank mismatch between B {self.B.shape} and A {self.A.shape}")
        if r < 1:
            raise ShapeError("LoraFactors: rank must be >= 1")
        if r > min(out, in_):
            raise ShapeError(f"LoraFactors: rank {r} exceeds min(out={out}, in={in_})")

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    @property
    def in_features(self) -> int:
        return self.A.shape[1]

    @classmethod
    def neutral(cls, out: int, in_: int, rank: int, rng: np.random.Generator) -> "LoraFactors":
        """Fresh trainable factors whose product is exactly zero at step 0.

        B is Gaussian with standard deviation 0.02 and A starts at zero, so
        the adapter is neutral while the cross-task overlap of the B factors
        is nonzero from the first step.
        """
        b = Tensor(rng.normal(0.0, 0.02, size=(out, rank)), requires_grad=True)
        a = Tensor(np.zeros((rank, in_)), requires_grad=True)
        return cls(B=b, A=a)

    def frozen(self) -> "LoraFactors":
        """A copy whose tensors receive no gradients."""
        return LoraFactors(B=detach(self.B), A=detach(self.A))


def delta_from_factors(f: LoraFactors) -> Tensor:
    """The dense perturbation B @ A realized by a factor pair."""
    return matmul(f.B, f.A)


def clamp_membership(t: Tensor, eps: float = MEMBERSHIP_EPS) -> Tensor:
    """Clamp entries with magnitude <= eps to +-eps, preserving sign.

    Gradients pass through unchanged.  Merged weights stay valid group members
    without aborting training; hitting the clamp is a measure-zero event and
    is logged.
    """
    small = np.abs(t.data) <= eps
    if not small.any():
        return t
    logger.warning("clamped %d merged-weight entries below the membership threshold %.1e", int(small.sum()), eps)
    signs = np.where(t.data < 0.0, -1.0, 1.0)
    clamped = np.where(small, signs * eps, t.data)
    return _record(clamped, "clamp_membership", [(t, lambda g: g)])


def apply_update(w: GroupElement, f: LoraFactors, order: int) -> Tensor:
    """Multiplicative update of a frozen weight: w * exp_taylor(B @ A, order).

    Differentiable with respect to A and B; the base receives no gradient.
    """
    if (f.out_features, f.in_features) != w.shape:
        raise ShapeError(f"apply_update: factors produce {(f.out_features, f.in_features)}, base is {w.shape}")
    merged = hadamard(detach(w.value), exp_taylor(delta_from_factors(f), order))
    return clamp_membership(merged)


def compose_task_updates(w: GroupElement, adapters: list[LoraFactors], order: int) -> Tensor:
    """Cumulative multiplicative update over a sequence of adapters, in task order.

    Returns w * exp_taylor(B_1 A_1) * ... * exp_taylor(B_T A_T).  The group is
    Abelian, so the result does not depend on the adapter order beyond
    floating-point rounding.
    """
    eff = detach(w.value)
    if not adapters:
        return eff
    for f in adapters:
        if (f.out_features, f.in_features) != w.shape:
            raise ShapeError(f"compose_task_updates: factors produce {(f.out_features, f.in_features)}, base is {w.shape}")
        eff = hadamard(eff, exp_taylor(delta_from_factors(f), order))
    return clamp_membership(eff)
